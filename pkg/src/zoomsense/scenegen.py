"""Seeded synthetic scenes and mask corruption.

Detection scenes hold Gaussian clusters of small objects. Cluster centres
either fall anywhere in the frame or around configured hotspots (given as
frame fractions), which gives a context-free policy a spatial prior to learn.
Segmentation scenes hold one centred object built from ellipses and thin bars;
:func:`corrupt_mask` damages its mask with boundary bands and error blobs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .env import Scene, SceneObject, scene_key
from .geometry import BBox, BitMask


class GenerationError(ValueError):
    """The generator config cannot be satisfied (objects do not fit)."""


@dataclass(frozen=True)
class GenConfig:
    width: int = 1024
    height: int = 1024
    n_clusters: int = 3
    objects_min: int = 6
    objects_max: int = 10
    side_min: int = 3
    side_max: int = 6
    cluster_sigma: float = 12.0
    cluster_extent: int = 30
    # flattened (fx, fy) pairs; empty -> cluster centres uniform over the frame
    hotspots: tuple[float, ...] = (0.25, 0.25, 0.75, 0.5, 0.415, 0.83)
    hotspot_jitter: float = 16.0
    n_distractors: int = 0
    distractor_side_min: int = 60
    distractor_side_max: int = 120
    category: str = "vehicle"
    distractor_category: str = "building"

    def check(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise GenerationError(f"frame must be positive, got {self.width}x{self.height}")
        if min(self.n_clusters, self.objects_min, self.n_distractors) < 0 or self.objects_min > self.objects_max:
            raise GenerationError("object counts must satisfy 0 <= objects_min <= objects_max")
        if not 1 <= self.side_min <= self.side_max or not 1 <= self.distractor_side_min <= self.distractor_side_max:
            raise GenerationError("object sides must satisfy 1 <= min <= max")
        if self.cluster_sigma < 0 or self.cluster_extent < 0 or self.hotspot_jitter < 0:
            raise GenerationError("spreads must be non-negative")
        if len(self.hotspots) % 2 or any(not 0.0 <= f <= 1.0 for f in self.hotspots):
            raise GenerationError("hotspots must be (fx, fy) pairs inside [0, 1]")
        reach = 2 * (self.cluster_extent + self.side_max)
        if self.n_clusters and self.objects_max and (reach > self.width or reach > self.height):
            raise GenerationError(f"clusters of reach {reach} do not fit a {self.width}x{self.height} frame")
        if self.n_distractors and (self.distractor_side_max > min(self.width, self.height)):
            raise GenerationError("distractors larger than the frame")


def _place(cx: float, cy: float, w: int, h: int, width: int, height: int) -> BBox:
    x1 = int(round(cx - (w - 1) / 2))
    y1 = int(round(cy - (h - 1) / 2))
    x1 = min(max(x1, 0), width - w)
    y1 = min(max(y1, 0), height - h)
    return BBox(x1, y1, x1 + w - 1, y1 + h - 1)


def generate_scene(cfg: GenConfig, seed: int, scene_id: str | None = None) -> Scene:
    """Clustered small objects plus optional large distractors; pure function of ``(cfg, seed)``."""
    cfg.check()
    rng = np.random.default_rng([int(seed), 0x5CE7E])
    W, H = cfg.width, cfg.height
    margin = cfg.cluster_extent + cfg.side_max
    hot = np.asarray(cfg.hotspots, dtype=np.float64).reshape(-1, 2)
    objects = []
    for c in range(cfg.n_clusters):
        if len(hot):
            fx, fy = hot[c % len(hot)]
            cx = fx * (W - 1) + rng.normal(0.0, cfg.hotspot_jitter)
            cy = fy * (H - 1) + rng.normal(0.0, cfg.hotspot_jitter)
        else:
            cx, cy = rng.uniform(0, W - 1), rng.uniform(0, H - 1)
        cx = min(max(cx, margin), W - 1 - margin)
        cy = min(max(cy, margin), H - 1 - margin)
        n = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
        for _ in range(n):
            w, h = (int(v) for v in rng.integers(cfg.side_min, cfg.side_max + 1, size=2))
            dx, dy = np.clip(rng.normal(0.0, cfg.cluster_sigma, 2), -cfg.cluster_extent, cfg.cluster_extent)
            objects.append(SceneObject(_place(cx + dx, cy + dy, w, h, W, H), cfg.category))
    for _ in range(cfg.n_distractors):
        w, h = (int(v) for v in rng.integers(cfg.distractor_side_min, cfg.distractor_side_max + 1, size=2))
        cx, cy = rng.uniform(0, W - 1), rng.uniform(0, H - 1)
        objects.append(SceneObject(_place(cx, cy, w, h, W, H), cfg.distractor_category))
    return Scene(W, H, tuple(objects), None, scene_id if scene_id is not None else f"det-{seed:06d}")


def generate_scenes(cfg: GenConfig, n: int, seed: int, prefix: str = "det") -> list[Scene]:
    """``n`` scenes with independent per-scene seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(int(seed)).generate_state(max(n, 1), dtype=np.uint32)[:n]
    return [generate_scene(cfg, int(s), f"{prefix}-{i:04d}") for i, s in enumerate(seeds)]


@dataclass(frozen=True)
class SegGenConfig:
    width: int = 256
    height: int = 256
    n_blobs: int = 3
    radius_min: float = 0.08
    radius_max: float = 0.2
    n_bars: int = 2
    bar_width: int = 3
    bar_length_min: float = 0.3
    bar_length_max: float = 0.5
    center_jitter: float = 0.05
    category: str = "object"

    def check(self) -> None:
        if self.width < 8 or self.height < 8:
            raise GenerationError(f"segmentation frame too small: {self.width}x{self.height}")
        if self.n_blobs < 1 or self.n_bars < 0 or self.bar_width < 1:
            raise GenerationError("need at least one blob, non-negative bars, bar_width >= 1")
        if not 0 < self.radius_min <= self.radius_max <= 0.5:
            raise GenerationError("radii must satisfy 0 < min <= max <= 0.5")
        if not 0 < self.bar_length_min <= self.bar_length_max <= 1.0:
            raise GenerationError("bar lengths must satisfy 0 < min <= max <= 1")


def generate_seg_scene(cfg: SegGenConfig, seed: int, scene_id: str | None = None) -> Scene:
    """One object made of overlapping ellipses and thin bars, roughly centred."""
    cfg.check()
    rng = np.random.default_rng([int(seed), 0x5E6])
    W, H = cfg.width, cfg.height
    side = min(W, H)
    yy, xx = np.mgrid[0:H, 0:W]
    cx = W / 2 + rng.normal(0, cfg.center_jitter * side)
    cy = H / 2 + rng.normal(0, cfg.center_jitter * side)
    bits = np.zeros((H, W), dtype=bool)
    for i in range(cfg.n_blobs):
        ox, oy = (0.0, 0.0) if i == 0 else rng.normal(0, 0.12 * side, 2)
        rx, ry = rng.uniform(cfg.radius_min, cfg.radius_max, 2) * side
        t = rng.uniform(0, np.pi)
        u = (xx - cx - ox) * np.cos(t) + (yy - cy - oy) * np.sin(t)
        v = -(xx - cx - ox) * np.sin(t) + (yy - cy - oy) * np.cos(t)
        bits |= (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    for _ in range(cfg.n_bars):
        length = rng.uniform(cfg.bar_length_min, cfg.bar_length_max) * side
        t = rng.uniform(0, np.pi)
        u = (xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)
        v = -(xx - cx) * np.sin(t) + (yy - cy) * np.cos(t)
        bits |= (np.abs(u) <= length / 2) & (np.abs(v) <= cfg.bar_width / 2)
    if not bits.any():
        bits[H // 2, W // 2] = True
    mask = BitMask(bits)
    ys, xs = np.nonzero(bits)
    box = BBox(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
    obj = SceneObject(box, cfg.category, mask.popcount(), mask)
    return Scene(W, H, (obj,), mask, scene_id if scene_id is not None else f"seg-{seed:06d}")


def generate_seg_scenes(cfg: SegGenConfig, n: int, seed: int, prefix: str = "seg") -> list[Scene]:
    seeds = np.random.SeedSequence(int(seed)).generate_state(max(n, 1), dtype=np.uint32)[:n]
    return [generate_seg_scene(cfg, int(s), f"{prefix}-{i:04d}") for i, s in enumerate(seeds)]


@dataclass(frozen=True)
class CorruptionConfig:
    n_bands: int = 6
    band_radius: int = 28
    band_width: int = 6
    n_blobs: int = 4
    blob_radius_min: int = 4
    blob_radius_max: int = 12
    blob_margin: int = 16

    def check(self) -> None:
        if min(self.n_bands, self.n_blobs) < 0:
            raise GenerationError("band and blob counts must be non-negative")
        if self.band_radius < 1 or self.band_width < 1:
            raise GenerationError("band radius and width must be >= 1")
        if not 1 <= self.blob_radius_min <= self.blob_radius_max or self.blob_margin < 0:
            raise GenerationError("blob radii must satisfy 1 <= min <= max")


def _disk(shape: tuple[int, int], cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.ogrid[0 : shape[0], 0 : shape[1]]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def corrupt_mask(gt: BitMask, cfg: CorruptionConfig, seed: int) -> BitMask:
    """Damage ``gt`` with local erosion/dilation bands on its boundary and XOR blobs nearby."""
    cfg.check()
    rng = np.random.default_rng([int(seed), 0xC0DE])
    g = gt.bits
    pred = g.copy()
    if cfg.n_bands and g.any():
        st = ndimage.generate_binary_structure(2, 1)
        eroded = ndimage.binary_erosion(g, st, iterations=cfg.band_width)
        dilated = ndimage.binary_dilation(g, st, iterations=cfg.band_width)
        boundary = np.argwhere(g & ~ndimage.binary_erosion(g, st))
        for _ in range(cfg.n_bands):
            y, x = boundary[rng.integers(len(boundary))]
            region = _disk(g.shape, x, y, cfg.band_radius)
            pred[region] = (dilated if rng.random() < 0.5 else eroded)[region]
    if cfg.n_blobs:
        if g.any():
            ys, xs = np.nonzero(g)
            x0, x1 = xs.min() - cfg.blob_margin, xs.max() + cfg.blob_margin
            y0, y1 = ys.min() - cfg.blob_margin, ys.max() + cfg.blob_margin
        else:
            x0, y0, x1, y1 = 0, 0, gt.width - 1, gt.height - 1
        for _ in range(cfg.n_blobs):
            r = rng.integers(cfg.blob_radius_min, cfg.blob_radius_max + 1)
            cx = rng.uniform(max(x0, 0), min(x1, gt.width - 1))
            cy = rng.uniform(max(y0, 0), min(y1, gt.height - 1))
            pred ^= _disk(g.shape, cx, cy, r)
    return BitMask(pred)


def initial_masks(scenes, cfg: CorruptionConfig, seed: int) -> list[BitMask]:
    """One corrupted starting mask per scene, seeded by ``(seed, scene_id)`` only."""
    out = []
    for s in scenes:
        if s.merged_gt_mask is None:
            raise GenerationError(f"scene {s.scene_id} has no ground-truth mask to corrupt")
        sub = int(np.random.SeedSequence([int(seed), scene_key(s.scene_id)]).generate_state(1)[0])
        out.append(corrupt_mask(s.merged_gt_mask, cfg, sub))
    return out
