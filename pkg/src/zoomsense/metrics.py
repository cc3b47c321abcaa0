"""Task-aware rewards and COCO-style detection metrics.

Matching is greedy and one-to-one: predictions are visited by descending
score (ties keep insertion order) and each takes the free same-category
ground truth with the highest IoU at or above the threshold. AP uses the
101-point recall grid with the max-precision-to-the-right envelope. AP and
AR are macro-averaged over the categories present in the ground truth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import kernels
from .geometry import BBox, BitMask, boxes_array, mask_iou

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
COCO_BUCKETS = {
    "small": (0.0, 32.0**2),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, math.inf),
}
_RECALL_GRID = np.arange(101) / 100.0  # exact i/100, no linspace drift


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    category: str
    score: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be finite and in [0, 1], got {self.score}")


class GroundTruth(NamedTuple):
    bbox: BBox
    category: str
    area: int | None = None

    @property
    def size(self) -> int:
        return self.bbox.area if self.area is None else self.area


def _as_gts(gts: Iterable) -> list[GroundTruth]:
    return [g if isinstance(g, GroundTruth) else GroundTruth(*g) for g in gts]


class APAR(NamedTuple):
    ap: float
    ar: float
    degenerate: bool = False


def suppress_duplicates(dets: Sequence[Detection], iou_thr: float = 0.5) -> list[Detection]:
    """Per-category NMS; survivors keep descending-score order."""
    if not dets:
        return []
    codes = {c: i for i, c in enumerate(sorted({d.category for d in dets}))}
    keep = kernels.nms(
        boxes_array(d.bbox for d in dets),
        np.array([d.score for d in dets]),
        np.array([codes[d.category] for d in dets], dtype=np.int64),
        iou_thr,
    )
    return [dets[i] for i in keep.tolist()]


def _score_order(preds: Sequence[Detection]) -> np.ndarray:
    return np.argsort(-np.array([p.score for p in preds], dtype=np.float64), kind="stable").astype(np.int64)


def match_detections(preds: Sequence[Detection], gts: Iterable, iou_thr: float) -> list[int]:
    """Greedy one-to-one matching; returns the matched gt index per prediction (or -1)."""
    gts = _as_gts(gts)
    if not preds:
        return []
    codes = {}
    for c in [g.category for g in gts] + [p.category for p in preds]:
        codes.setdefault(c, len(codes))
    iou = kernels.iou_matrix(boxes_array(p.bbox for p in preds), boxes_array(g.bbox for g in gts))
    m = kernels.greedy_match(
        iou,
        np.array([codes[p.category] for p in preds], dtype=np.int64),
        np.array([codes[g.category] for g in gts], dtype=np.int64),
        _score_order(preds),
        float(iou_thr),
    )
    return m.tolist()


def interpolated_ap(tp: Sequence[bool], n_gt: int) -> float:
    """101-point AP for a score-ranked list of TP/FP flags."""
    if n_gt <= 0:
        raise ValueError("n_gt must be positive")
    tp = np.asarray(tp, dtype=bool)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, _RECALL_GRID, side="left")
    vals = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(vals.sum() / len(_RECALL_GRID))


class _Image:
    """Per-image arrays reused across thresholds."""

    def __init__(self, preds: Sequence[Detection], gts: Sequence[GroundTruth], codes: dict):
        self.preds = list(preds)
        self.gts = list(gts)
        self.pred_cat = np.array([codes[p.category] for p in preds], dtype=np.int64)
        self.gt_cat = np.array([codes[g.category] for g in gts], dtype=np.int64)
        self.scores = np.array([p.score for p in preds], dtype=np.float64)
        self.pred_area = np.array([p.bbox.area for p in preds], dtype=np.float64)
        self.gt_area = np.array([g.size for g in gts], dtype=np.float64)
        self.iou = kernels.iou_matrix(boxes_array(p.bbox for p in preds), boxes_array(g.bbox for g in gts))
        self.order = _score_order(preds)

    def match(self, thr: float) -> np.ndarray:
        if not self.preds:
            return np.zeros(0, dtype=np.int64)
        return kernels.greedy_match(self.iou, self.pred_cat, self.gt_cat, self.order, thr)


def _evaluate(
    images: Sequence[tuple[Sequence[Detection], Iterable]],
    thresholds: Sequence[float],
    buckets: dict[str, tuple[float, float]],
) -> tuple[dict[tuple[float, str], APAR], bool]:
    imgs_raw = [(list(p), _as_gts(g)) for p, g in images]
    codes: dict[str, int] = {}
    for p, g in imgs_raw:
        for x in g:
            codes.setdefault(x.category, len(codes))
    gt_cats = sorted(codes.values())
    for p, g in imgs_raw:
        for x in p:
            codes.setdefault(x.category, len(codes))
    imgs = [_Image(p, g, codes) for p, g in imgs_raw]
    any_pred = any(len(im.preds) for im in imgs)

    results: dict[tuple[float, str], APAR] = {}
    if not gt_cats:
        val = 0.0 if any_pred else 1.0
        for thr in thresholds:
            for b in buckets:
                results[(thr, b)] = APAR(val, val, True)
        return results, True

    scores_all = np.concatenate([im.scores for im in imgs]) if any_pred else np.zeros(0)
    cats_all = np.concatenate([im.pred_cat for im in imgs]) if any_pred else np.zeros(0, dtype=np.int64)
    parea_all = np.concatenate([im.pred_area for im in imgs]) if any_pred else np.zeros(0)
    rank = np.argsort(-scores_all, kind="stable")

    for thr in thresholds:
        matches = [im.match(thr) for im in imgs]
        # gt area of the matched gt per prediction (nan when unmatched)
        marea = []
        for im, m in zip(imgs, matches):
            a = np.full(len(m), np.nan)
            hit = m >= 0
            a[hit] = im.gt_area[m[hit]]
            marea.append(a)
        marea_all = np.concatenate(marea) if any_pred else np.zeros(0)
        for bname, (lo, hi) in buckets.items():
            in_b = lambda a: (a >= lo) & (a < hi)  # noqa: E731
            aps, ars = [], []
            for c in gt_cats:
                n_gt = int(sum(np.count_nonzero((im.gt_cat == c) & in_b(im.gt_area)) for im in imgs))
                matched = ~np.isnan(marea_all)
                counted = np.where(matched, in_b(np.nan_to_num(marea_all, nan=-1.0)), in_b(parea_all))
                sel = rank[(cats_all[rank] == c) & counted[rank]]
                tp = matched[sel]
                if n_gt == 0:
                    v = 0.0 if len(sel) else 1.0
                    aps.append(v)
                    ars.append(v)
                    continue
                aps.append(interpolated_ap(tp, n_gt))
                ars.append(int(tp.sum()) / n_gt)
            results[(thr, bname)] = APAR(float(np.mean(aps)), float(np.mean(ars)))
    return results, False


def ap_ar_at(preds: Sequence[Detection], gts: Iterable, iou_thr: float) -> APAR:
    res, degenerate = _evaluate([(preds, gts)], [iou_thr], {"all": (0.0, math.inf)})
    r = res[(iou_thr, "all")]
    return APAR(r.ap, r.ar, degenerate)


def r_detect(preds: Sequence[Detection], gts: Iterable, iou_thr: float = 0.5) -> float:
    """Detection reward: AP plus AR at one IoU threshold, in ``[0, 2]``."""
    r = ap_ar_at(preds, gts, iou_thr)
    return r.ap + r.ar


def r_seg(pred_mask: BitMask, gt_mask: BitMask) -> float:
    return mask_iou(pred_mask, gt_mask)


@dataclass(frozen=True)
class EvalResult:
    ap_by_threshold: dict[float, float] = field(default_factory=dict)
    ar_by_threshold: dict[float, float] = field(default_factory=dict)
    ap_small: float = 0.0
    ap_medium: float = 0.0
    ap_large: float = 0.0
    ar_small: float = 0.0
    ar_medium: float = 0.0
    ar_large: float = 0.0
    coco_ap: float = 0.0
    coco_ar: float = 0.0

    def as_dict(self) -> dict:
        d = {f"ap@{t:.2f}": v for t, v in self.ap_by_threshold.items()}
        d.update({f"ar@{t:.2f}": v for t, v in self.ar_by_threshold.items()})
        for k in ("ap_small", "ap_medium", "ap_large", "ar_small", "ar_medium", "ar_large", "coco_ap", "coco_ar"):
            d[k] = getattr(self, k)
        return d


def coco_eval(
    images: Sequence[tuple[Sequence[Detection], Iterable]],
    size_buckets: dict[str, tuple[float, float]] | None = None,
    thresholds: Sequence[float] = COCO_THRESHOLDS,
) -> EvalResult:
    """COCO-style AP/AR over one or more images.

    ``images`` holds ``(predictions, ground_truths)`` pairs. Size-bucketed
    numbers are averaged over ``thresholds``, as COCO's AP_s/AP_m/AP_l are.
    Within a bucket, ground truths outside it are ignored along with the
    predictions matched to them; unmatched predictions count by their own area.
    """
    buckets = {"all": (0.0, math.inf)}
    buckets.update(size_buckets if size_buckets is not None else COCO_BUCKETS)
    thresholds = tuple(thresholds)
    res, _ = _evaluate(images, thresholds, buckets)
    ap_t = {t: res[(t, "all")].ap for t in thresholds}
    ar_t = {t: res[(t, "all")].ar for t in thresholds}

    def bucket_mean(name: str, attr: str) -> float:
        if name not in buckets:
            return 0.0
        return math.fsum(getattr(res[(t, name)], attr) for t in thresholds) / len(thresholds)

    return EvalResult(
        ap_by_threshold=ap_t,
        ar_by_threshold=ar_t,
        ap_small=bucket_mean("small", "ap"),
        ap_medium=bucket_mean("medium", "ap"),
        ap_large=bucket_mean("large", "ap"),
        ar_small=bucket_mean("small", "ar"),
        ar_medium=bucket_mean("medium", "ar"),
        ar_large=bucket_mean("large", "ar"),
        coco_ap=math.fsum(ap_t.values()) / len(thresholds),
        coco_ar=math.fsum(ar_t.values()) / len(thresholds),
    )


def combined_reward(heuristic: float, task: float, weights: tuple[float, float] = (1.0, 1.0)) -> float:
    """``w_h * heuristic + w_t * task``; the heuristic may be a RewardBreakdown."""
    h = getattr(heuristic, "heuristic", heuristic)
    return weights[0] * h + weights[1] * task
