"""Sensing policies: scripted baselines and the trainable anchor-grid policy.

Every policy maps an :class:`~zoomsense.env.EpisodeContext` to a
:class:`PolicyOutput`. The trainable policy keeps one logit per anchor box and
picks ``k`` anchors without replacement by sequential softmax (Plackett-Luce),
so the probability of an ordered selection and its gradient are exact.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import kernels
from .geometry import BBox, BitMask, GeometryError, area_ratio, boxes_array

ANCHOR_SCALES = (1 / 2, 1 / 3, 1 / 4, 1 / 6)


class PolicyConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyOutput:
    """Ordered proposals in full-frame pixels.

    ``indices`` are anchor indices when the proposals came from an anchor set.
    ``raw_text`` and ``text_frame`` are set for text policies: the text is what
    gets format-checked, in the ``text_frame`` coordinate system.
    """

    proposals: tuple[BBox, ...] = ()
    log_prob: float = 0.0
    raw_text: str | None = None
    indices: tuple[int, ...] | None = None
    text_frame: tuple[int, int] | None = None
    error: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "proposals", tuple(self.proposals))
        if self.log_prob > 1e-12:
            raise ValueError(f"log_prob must be <= 0, got {self.log_prob}")


def _positions(extent: int, side: int) -> list[int]:
    stride = max(1, side // 2)
    pos = list(range(0, extent - side + 1, stride))
    if pos[-1] != extent - side:
        pos.append(extent - side)
    return pos


@lru_cache(maxsize=32)
def build_anchors(
    width: int,
    height: int,
    scales: tuple[float, ...] = ANCHOR_SCALES,
    r_min: float = 0.01,
    r_max: float = 0.5,
) -> tuple[BBox, ...]:
    """Square multi-scale windows with half-window stride, largest scale first.

    The last window on each axis is aligned to the frame edge. Duplicates are
    dropped and windows outside the ``[r_min, r_max]`` area-ratio range removed.
    """
    short = min(width, height)
    seen = set()
    out = []
    for s in scales:
        side = max(1, min(short, int(round(short * s))))
        for y in _positions(height, side):
            for x in _positions(width, side):
                b = BBox(x, y, x + side - 1, y + side - 1)
                if b in seen:
                    continue
                seen.add(b)
                if r_min <= area_ratio(b, width, height) <= r_max:
                    out.append(b)
    return tuple(out)


def _uniform_log_prob(n: int, k: int) -> float:
    return -math.fsum(math.log(n - i) for i in range(k))


def propose_random(frame: tuple[int, int], k: int, rng: np.random.Generator, anchors=None) -> PolicyOutput:
    """``k`` distinct anchors drawn uniformly, in draw order."""
    anchors = build_anchors(*frame) if anchors is None else tuple(anchors)
    n = len(anchors)
    if not 1 <= k <= n:
        raise PolicyConfigError(f"k={k} must be in [1, {n}] for this anchor set")
    idx = tuple(int(i) for i in rng.choice(n, size=k, replace=False))
    return PolicyOutput(tuple(anchors[i] for i in idx), _uniform_log_prob(n, k), indices=idx)


def grid_cells(frame: tuple[int, int], grid_side: int) -> list[BBox]:
    """Row-major tiling into ``grid_side x grid_side`` near-equal cells."""
    w, h = frame
    if grid_side < 1 or grid_side > min(w, h):
        raise PolicyConfigError(f"grid_side {grid_side} does not fit a {w}x{h} frame")
    xs = [int(round(i * w / grid_side)) for i in range(grid_side + 1)]
    ys = [int(round(i * h / grid_side)) for i in range(grid_side + 1)]
    return [BBox(xs[c], ys[r], xs[c + 1] - 1, ys[r + 1] - 1) for r in range(grid_side) for c in range(grid_side)]


def propose_grid(frame: tuple[int, int], k: int, grid_side: int = 3) -> PolicyOutput:
    """First ``k`` grid cells in raster order (the exhaustive-scan baseline)."""
    cells = grid_cells(frame, grid_side)
    if k > len(cells):
        warnings.warn(f"k={k} exceeds {len(cells)} grid cells; using all cells", stacklevel=2)
        k = len(cells)
    return PolicyOutput(tuple(cells[:k]))


def propose_oracle_coverage(
    scene,
    k: int,
    anchors: Sequence[BBox] | None = None,
    *,
    crop_resolution: int = 840,
    min_apparent_area: float = 100.0,
    pred_mask: BitMask | None = None,
) -> PolicyOutput:
    """Greedy set cover with ground-truth access; ties go to the lowest anchor index.

    Detection: each step takes the anchor revealing the most not-yet-covered
    objects (centre inside, zoomed area over threshold). Segmentation (when
    ``pred_mask`` is given): the anchor covering the most not-yet-covered
    disagreement pixels.
    """
    anchors = build_anchors(scene.width, scene.height) if anchors is None else tuple(anchors)
    if not 1 <= k <= len(anchors):
        raise PolicyConfigError(f"k={k} must be in [1, {len(anchors)}]")
    arr = boxes_array(anchors)
    chosen: list[int] = []
    if pred_mask is not None:
        if scene.merged_gt_mask is None:
            raise ValueError("segmentation oracle needs a ground-truth mask")
        todo = pred_mask.bits ^ scene.merged_gt_mask.bits
        for _ in range(k):
            gain = kernels.box_sums(BitMask(todo).integral(), arr).astype(np.float64)
            gain[chosen] = -1.0
            best = int(np.argmax(gain))
            chosen.append(best)
            b = anchors[best]
            todo = todo.copy()
            todo[b.y1 : b.y2 + 1, b.x1 : b.x2 + 1] = False
    else:
        _, centers, areas = scene._arrays
        scale = crop_resolution / np.maximum(arr[:, 2] - arr[:, 0] + 1, arr[:, 3] - arr[:, 1] + 1)
        cover = (
            (centers[None, :, 0] >= arr[:, None, 0])
            & (centers[None, :, 0] <= arr[:, None, 2])
            & (centers[None, :, 1] >= arr[:, None, 1])
            & (centers[None, :, 1] <= arr[:, None, 3])
            & (areas[None, :] * scale[:, None] ** 2 >= min_apparent_area)
        )
        todo = np.ones(len(areas), dtype=bool)
        for _ in range(k):
            gain = (cover & todo[None, :]).sum(axis=1).astype(np.float64)
            gain[chosen] = -1.0
            best = int(np.argmax(gain))
            chosen.append(best)
            todo &= ~cover[best]
    return PolicyOutput(tuple(anchors[i] for i in chosen), indices=tuple(chosen))


class AnchorGridPolicy:
    """Softmax-without-replacement over a fixed anchor set, one logit per anchor."""

    def __init__(self, anchors: Sequence[BBox], k: int = 3, logits=None, decode: str = "sample"):
        self.anchors = tuple(anchors)
        n = len(self.anchors)
        if not 1 <= k <= n:
            raise PolicyConfigError(f"k={k} must be in [1, {n}]")
        self.k = k
        self.logits = np.zeros(n) if logits is None else np.array(logits, dtype=np.float64)
        if self.logits.shape != (n,) or not np.all(np.isfinite(self.logits)):
            raise PolicyConfigError("need one finite logit per anchor")
        if decode not in ("sample", "greedy"):
            raise PolicyConfigError(f"unknown decode mode {decode!r}")
        self.decode = decode
        self._index = {b: i for i, b in enumerate(self.anchors)}

    @classmethod
    def for_frame(cls, width: int, height: int, k: int = 3, r_min: float = 0.01, r_max: float = 0.5):
        return cls(build_anchors(width, height, ANCHOR_SCALES, r_min, r_max), k)

    def __len__(self) -> int:
        return len(self.anchors)

    def _output(self, idx: Sequence[int]) -> PolicyOutput:
        idx = tuple(int(i) for i in idx)
        lp = kernels.pl_log_prob(self.logits, np.asarray(idx, dtype=np.int64))
        return PolicyOutput(tuple(self.anchors[i] for i in idx), min(lp, 0.0), indices=idx)

    def sample(self, rng: np.random.Generator) -> PolicyOutput:
        # Gumbel top-k draws the same ordered selection law as sequential softmax
        g = self.logits - np.log(-np.log(rng.random(len(self.logits))))
        idx = np.argsort(-g, kind="stable")[: self.k]
        return self._output(idx)

    def greedy(self) -> PolicyOutput:
        return self._output(np.argsort(-self.logits, kind="stable")[: self.k])

    def propose(self, ctx) -> PolicyOutput:
        return self.greedy() if self.decode == "greedy" else self.sample(ctx.rng)

    def indices_of(self, proposals: Sequence[BBox]) -> np.ndarray:
        try:
            idx = [self._index[b] for b in proposals]
        except KeyError as exc:
            raise GeometryError(f"proposal {exc.args[0]} is not an anchor of this policy") from None
        if len(set(idx)) != len(idx):
            raise GeometryError("proposals repeat an anchor")
        return np.asarray(idx, dtype=np.int64)

    def log_prob_of(self, proposals: Sequence[BBox]) -> float:
        return kernels.pl_log_prob(self.logits, self.indices_of(proposals))

    def grad_log_prob(self, proposals: Sequence[BBox]) -> np.ndarray:
        return kernels.pl_log_prob_grad(self.logits, self.indices_of(proposals))[1]

    def probabilities(self) -> np.ndarray:
        z = np.exp(self.logits - self.logits.max())
        return z / z.sum()

    def snapshot(self) -> dict:
        return {
            "k": self.k,
            "anchors": [b.as_list() for b in self.anchors],
            "logits": [float(v) for v in self.logits],
        }

    @classmethod
    def from_snapshot(cls, data: dict, decode: str = "sample") -> "AnchorGridPolicy":
        try:
            anchors = [BBox(*a) for a in data["anchors"]]
            return cls(anchors, int(data["k"]), data["logits"], decode)
        except (KeyError, TypeError) as exc:
            raise PolicyConfigError(f"malformed policy snapshot: {exc}") from None

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.snapshot(), f, indent=1)
            f.write("\n")

    @classmethod
    def load(cls, path, decode: str = "sample") -> "AnchorGridPolicy":
        with open(path, encoding="utf-8") as f:
            return cls.from_snapshot(json.load(f), decode)


def sample_k(policy: AnchorGridPolicy, rng: np.random.Generator) -> PolicyOutput:
    return policy.sample(rng)


def log_prob_of(policy: AnchorGridPolicy, proposals: Sequence[BBox]) -> float:
    return policy.log_prob_of(proposals)


def grad_log_prob(policy: AnchorGridPolicy, proposals: Sequence[BBox]) -> np.ndarray:
    return policy.grad_log_prob(proposals)


class RandomPolicy:
    def __init__(self, k: int = 3):
        self.k = k

    def propose(self, ctx) -> PolicyOutput:
        return propose_random((ctx.scene.width, ctx.scene.height), self.k, ctx.rng)


class GridPolicy:
    def __init__(self, k: int = 3, grid_side: int = 3):
        self.k, self.grid_side = k, grid_side

    def propose(self, ctx) -> PolicyOutput:
        return propose_grid((ctx.scene.width, ctx.scene.height), self.k, self.grid_side)


class OraclePolicy:
    def __init__(self, k: int = 3, crop_resolution: int = 840, min_apparent_area: float = 100.0):
        self.k = k
        self.crop_resolution = crop_resolution
        self.min_apparent_area = min_apparent_area

    def propose(self, ctx) -> PolicyOutput:
        return propose_oracle_coverage(
            ctx.scene,
            self.k,
            crop_resolution=self.crop_resolution,
            min_apparent_area=self.min_apparent_area,
            pred_mask=ctx.pred_mask,
        )
