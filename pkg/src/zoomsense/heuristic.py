"""Task-model-independent rewards over a response's region proposals.

Four components, each in ``[0, 1]``: format validity, pairwise non-overlap,
area range and ground-truth coverage. Their weighted sum is the heuristic
reward. A response that fails to parse has no boxes, so every spatial
component is 0 for it.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .codec import ParseOutcome
from .geometry import BBox, BitMask, area_ratio, boxes_array, mask_dice, mask_iou

COVERAGE_MODES = ("mask", "gtbox", "maskmask")


@dataclass(frozen=True)
class HeuristicConfig:
    tau: float = 0.3
    r_min: float = 0.01
    r_max: float = 0.5
    theta: float = 0.5
    delta: float = 0.5
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    # convex mix over applicable coverage modes; empty -> single applicable mode
    coverage_mix: Mapping[str, float] = field(default_factory=dict)
    use_dice: bool = True

    def __post_init__(self):
        if not 0 <= self.tau < 1:
            raise ValueError(f"tau must be in [0, 1), got {self.tau}")
        if not 0 < self.r_min < self.r_max <= 1:
            raise ValueError(f"need 0 < r_min < r_max <= 1, got {self.r_min}, {self.r_max}")
        if not 0 <= self.theta <= 1:
            raise ValueError(f"theta must be in [0, 1], got {self.theta}")
        if not 0 < self.delta <= 1:
            raise ValueError(f"delta must be in (0, 1], got {self.delta}")
        if len(self.weights) != 4 or any(w < 0 for w in self.weights):
            raise ValueError(f"need 4 non-negative weights, got {self.weights}")
        for k, w in self.coverage_mix.items():
            if k not in COVERAGE_MODES or w < 0:
                raise ValueError(f"bad coverage mix entry {k}={w}")


@dataclass(frozen=True)
class RewardBreakdown:
    r_format: float
    r_no_overlap: float
    r_area: float
    r_coverage: float
    heuristic: float
    r_task: float = 0.0
    total: float = 0.0

    def with_task(self, r_task: float, w_heuristic: float = 1.0, w_task: float = 1.0) -> "RewardBreakdown":
        return replace(self, r_task=r_task, total=w_heuristic * self.heuristic + w_task * r_task)

    def as_dict(self) -> dict[str, float]:
        return {
            "r_format": self.r_format,
            "r_no_overlap": self.r_no_overlap,
            "r_area": self.r_area,
            "r_coverage": self.r_coverage,
            "heuristic": self.heuristic,
            "r_task": self.r_task,
            "total": self.total,
        }


def r_format(outcome: ParseOutcome) -> float:
    return 1.0 if outcome.ok else 0.0


def r_no_overlap(boxes: Sequence[BBox], tau: float) -> float:
    if not boxes:
        return 0.0
    m = kernels.iou_matrix(boxes_array(boxes), boxes_array(boxes))
    iu = np.triu_indices(len(boxes), k=1)
    return 1.0 if np.all(m[iu] <= tau) else 0.0


def r_area(boxes: Sequence[BBox], width: int, height: int, r_min: float, r_max: float) -> float:
    if not boxes:
        return 0.0
    return 1.0 if all(r_min <= area_ratio(b, width, height) <= r_max for b in boxes) else 0.0


def r_coverage_mask(boxes: Sequence[BBox], gt_mask: BitMask, theta: float) -> float:
    """Fraction of boxes whose set-pixel density in ``gt_mask`` reaches ``theta``."""
    if not boxes:
        return 0.0
    arr = boxes_array(boxes)
    for b in boxes:
        if not b.in_frame(gt_mask.width, gt_mask.height):
            raise ValueError(f"box {b.as_list()} outside mask frame")
    counts = kernels.box_sums(gt_mask.integral(), arr)
    areas = (arr[:, 2] - arr[:, 0] + 1) * (arr[:, 3] - arr[:, 1] + 1)
    hits = sum(1 for c, a in zip(counts.tolist(), areas.tolist()) if c / a >= theta)
    return hits / len(boxes)


def r_coverage_gtbox(boxes: Sequence[BBox], gt_boxes: Sequence[BBox], delta: float) -> float:
    """Fraction of gt boxes matched (IoU >= delta) by at least one proposal."""
    if not gt_boxes:
        return 1.0
    if not boxes:
        return 0.0
    m = kernels.iou_matrix(boxes_array(boxes), boxes_array(gt_boxes))
    return int(np.count_nonzero((m >= delta).any(axis=0))) / len(gt_boxes)


def r_coverage_maskmask(pred_mask: BitMask, gt_mask: BitMask, use_dice: bool = True) -> float:
    return mask_dice(pred_mask, gt_mask) if use_dice else mask_iou(pred_mask, gt_mask)


def heuristic_total(
    fmt: float, no_overlap: float, area: float, coverage: float, cfg: HeuristicConfig
) -> RewardBreakdown:
    w = cfg.weights
    if fmt == 0.0:
        no_overlap = area = coverage = 0.0
    h = w[0] * fmt + w[1] * no_overlap + w[2] * area + w[3] * coverage
    return RewardBreakdown(fmt, no_overlap, area, coverage, h, 0.0, h)


def coverage_reward(
    boxes: Sequence[BBox],
    width: int,
    height: int,
    cfg: HeuristicConfig,
    *,
    gt_mask: BitMask | None = None,
    gt_boxes: Sequence[BBox] | None = None,
    target_mask: BitMask | None = None,
) -> float:
    """Coverage under whichever modes the inputs make applicable.

    ``target_mask`` enables mask-to-mask mode: the proposals are rasterized into
    one mask and compared to it. Without a ``coverage_mix`` the single
    highest-priority applicable mode is used (maskmask, then mask, then gtbox).
    """
    if not boxes:
        return 0.0
    values = {}
    if target_mask is not None:
        merged = BitMask.from_boxes(width, height, boxes)
        values["maskmask"] = r_coverage_maskmask(merged, target_mask, cfg.use_dice)
    if gt_mask is not None:
        values["mask"] = r_coverage_mask(boxes, gt_mask, cfg.theta)
    if gt_boxes is not None:
        values["gtbox"] = r_coverage_gtbox(boxes, gt_boxes, cfg.delta)
    if not values:
        return 0.0
    if not cfg.coverage_mix:
        for mode in ("maskmask", "mask", "gtbox"):
            if mode in values:
                return values[mode]
    wsum = sum(cfg.coverage_mix.get(k, 0.0) for k in values)
    if wsum <= 0:
        return 0.0
    return sum(cfg.coverage_mix.get(k, 0.0) * v for k, v in values.items()) / wsum


def score_heuristic(
    outcome: ParseOutcome,
    width: int,
    height: int,
    cfg: HeuristicConfig,
    *,
    gt_mask: BitMask | None = None,
    gt_boxes: Sequence[BBox] | None = None,
    target_mask: BitMask | None = None,
) -> RewardBreakdown:
    """All four components for one parsed response against one scene."""
    boxes = list(outcome.boxes) if outcome.ok else []
    fmt = r_format(outcome)
    if not boxes:
        return heuristic_total(fmt, 0.0, 0.0, 0.0, cfg)
    return heuristic_total(
        fmt,
        r_no_overlap(boxes, cfg.tau),
        r_area(boxes, width, height, cfg.r_min, cfg.r_max),
        coverage_reward(boxes, width, height, cfg, gt_mask=gt_mask, gt_boxes=gt_boxes, target_mask=target_mask),
        cfg,
    )
