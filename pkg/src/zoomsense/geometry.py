"""Integer-pixel boxes, binary masks and crop transforms.

All boxes use inclusive corners: a box ``[x1, y1, x2, y2]`` covers
``(x2 - x1 + 1) * (y2 - y1 + 1)`` pixels. COCO ``xywh`` boxes convert with
``x2 = x + w - 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import kernels


class GeometryError(ValueError):
    """Domain error: invalid box, frame violation, or mismatched mask sizes."""


@dataclass(frozen=True, slots=True)
class BBox:
    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise GeometryError(f"{name} must be an integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise GeometryError(f"inverted box {self.as_list()}")

    @classmethod
    def from_xywh(cls, x: int, y: int, w: int, h: int) -> "BBox":
        return cls(x, y, x + w - 1, y + h - 1)

    @classmethod
    def full(cls, width: int, height: int) -> "BBox":
        return cls(0, 0, width - 1, height - 1)

    @property
    def width(self) -> int:
        return self.x2 - self.x1 + 1

    @property
    def height(self) -> int:
        return self.y2 - self.y1 + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def as_list(self) -> list[int]:
        return [self.x1, self.y1, self.x2, self.y2]

    def in_frame(self, width: int, height: int) -> bool:
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= width - 1 and self.y2 <= height - 1

    def contains_point(self, x: float, y: float) -> bool:
        return self.x1 <= x <= self.x2 and self.y1 <= y <= self.y2

    def contains(self, other: "BBox") -> bool:
        return (
            self.x1 <= other.x1
            and self.y1 <= other.y1
            and other.x2 <= self.x2
            and other.y2 <= self.y2
        )

    def intersection(self, other: "BBox") -> "BBox | None":
        x1, y1 = max(self.x1, other.x1), max(self.y1, other.y1)
        x2, y2 = min(self.x2, other.x2), min(self.y2, other.y2)
        if x1 > x2 or y1 > y2:
            return None
        return BBox(x1, y1, x2, y2)


def boxes_array(boxes: Iterable[BBox]) -> np.ndarray:
    """Stack boxes into an ``(n, 4)`` int64 array."""
    out = [b.as_list() for b in boxes]
    return np.asarray(out, dtype=np.int64).reshape(-1, 4)


def _check_frame(b: BBox, width: int, height: int) -> None:
    if width <= 0 or height <= 0:
        raise GeometryError(f"frame must be positive, got {width}x{height}")
    if not b.in_frame(width, height):
        raise GeometryError(f"box {b.as_list()} outside {width}x{height} frame")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union with inclusive pixel areas."""
    inter = a.intersection(b)
    if inter is None:
        return 0.0
    i = inter.area
    return i / (a.area + b.area - i)


def iou_matrix(a: Sequence[BBox], b: Sequence[BBox]) -> np.ndarray:
    return kernels.iou_matrix(boxes_array(a), boxes_array(b))


def area_ratio(b: BBox, width: int, height: int) -> float:
    _check_frame(b, width, height)
    return b.area / (width * height)


class BitMask:
    """Immutable binary raster of shape ``(height, width)``, row-major."""

    __slots__ = ("_bits", "_integral")

    def __init__(self, bits):
        arr = np.array(bits, dtype=bool, copy=True)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise GeometryError(f"mask must be a non-empty 2-D array, got shape {arr.shape}")
        arr.setflags(write=False)
        self._bits = arr
        self._integral = None

    @classmethod
    def zeros(cls, width: int, height: int) -> "BitMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def ones(cls, width: int, height: int) -> "BitMask":
        return cls(np.ones((height, width), dtype=bool))

    @classmethod
    def from_boxes(cls, width: int, height: int, boxes: Iterable[BBox]) -> "BitMask":
        arr = np.zeros((height, width), dtype=bool)
        for b in boxes:
            _check_frame(b, width, height)
            arr[b.y1 : b.y2 + 1, b.x1 : b.x2 + 1] = True
        return cls(arr)

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    @property
    def width(self) -> int:
        return self._bits.shape[1]

    @property
    def height(self) -> int:
        return self._bits.shape[0]

    def popcount(self) -> int:
        return int(np.count_nonzero(self._bits))

    def integral(self) -> np.ndarray:
        """Summed-area table of shape ``(H+1, W+1)`` (cached)."""
        if self._integral is None:
            s = np.zeros((self.height + 1, self.width + 1), dtype=np.int64)
            np.cumsum(np.cumsum(self._bits, axis=0, dtype=np.int64), axis=1, out=s[1:, 1:])
            s.setflags(write=False)
            self._integral = s
        return self._integral

    def count_in(self, b: BBox) -> int:
        _check_frame(b, self.width, self.height)
        return int(np.count_nonzero(self._bits[b.y1 : b.y2 + 1, b.x1 : b.x2 + 1]))

    def to_runs(self) -> list[list[int]]:
        """Row-major ``[offset, length]`` runs of set bits."""
        flat = np.concatenate(([False], self._bits.ravel(), [False]))
        edges = np.flatnonzero(flat[1:] != flat[:-1])
        starts, ends = edges[0::2], edges[1::2]
        return [[int(s), int(e - s)] for s, e in zip(starts, ends)]

    @classmethod
    def from_runs(cls, width: int, height: int, runs: Iterable[Sequence[int]]) -> "BitMask":
        flat = np.zeros(width * height, dtype=bool)
        for off, length in runs:
            if off < 0 or length < 0 or off + length > flat.size:
                raise GeometryError(f"run [{off}, {length}] outside {width}x{height} mask")
            flat[off : off + length] = True
        return cls(flat.reshape(height, width))

    def __eq__(self, other):
        if not isinstance(other, BitMask):
            return NotImplemented
        return self._bits.shape == other._bits.shape and bool(np.array_equal(self._bits, other._bits))

    def __hash__(self):
        return hash((self._bits.shape, self._bits.tobytes()))

    def __repr__(self):
        return f"BitMask({self.width}x{self.height}, popcount={self.popcount()})"


def mask_density_in_box(b: BBox, m: BitMask) -> float:
    """Fraction of the box's pixels that are set in ``m``."""
    return m.count_in(b) / b.area


def _overlap_counts(a: BitMask, b: BitMask) -> tuple[int, int, int]:
    if a.bits.shape != b.bits.shape:
        raise GeometryError(
            f"mask size mismatch: {a.width}x{a.height} vs {b.width}x{b.height}"
        )
    inter = int(np.count_nonzero(a.bits & b.bits))
    return inter, a.popcount(), b.popcount()


def mask_iou(a: BitMask, b: BitMask) -> float:
    """``|a & b| / |a | b|``; two empty masks agree perfectly (1.0)."""
    inter, na, nb = _overlap_counts(a, b)
    union = na + nb - inter
    if union == 0:
        return 1.0
    return inter / union


def mask_dice(a: BitMask, b: BitMask) -> float:
    inter, na, nb = _overlap_counts(a, b)
    if na + nb == 0:
        return 1.0
    return 2 * inter / (na + nb)


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


@dataclass(frozen=True, slots=True)
class CropTransform:
    """Crop ``source`` out of the full frame and resize it to ``target_w x target_h``."""

    source: BBox
    target_w: int
    target_h: int

    def __post_init__(self):
        if self.target_w <= 0 or self.target_h <= 0:
            raise GeometryError(f"target size must be positive, got {self.target_w}x{self.target_h}")

    @property
    def scale_x(self) -> float:
        return self.target_w / self.source.width

    @property
    def scale_y(self) -> float:
        return self.target_h / self.source.height


def remap_to_crop(t: CropTransform, b: BBox) -> BBox:
    """Full-frame box to crop-local pixels (pixel edges scale, inclusive ends)."""
    s = t.source
    cx = lambda v: min(max(v, 0), t.target_w - 1)  # noqa: E731
    cy = lambda v: min(max(v, 0), t.target_h - 1)  # noqa: E731
    x1 = cx(round_half_away((b.x1 - s.x1) * t.scale_x))
    y1 = cy(round_half_away((b.y1 - s.y1) * t.scale_y))
    x2 = cx(round_half_away((b.x2 - s.x1 + 1) * t.scale_x - 1))
    y2 = cy(round_half_away((b.y2 - s.y1 + 1) * t.scale_y - 1))
    return BBox(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2))


def remap_to_full(t: CropTransform, b_local: BBox) -> BBox:
    """Crop-local box back to full-frame pixels, clamped into the source box."""
    s = t.source
    cx = lambda v: min(max(v, s.x1), s.x2)  # noqa: E731
    cy = lambda v: min(max(v, s.y1), s.y2)  # noqa: E731
    x1 = cx(round_half_away(b_local.x1 / t.scale_x) + s.x1)
    y1 = cy(round_half_away(b_local.y1 / t.scale_y) + s.y1)
    x2 = cx(round_half_away((b_local.x2 + 1) / t.scale_x - 1) + s.x1)
    y2 = cy(round_half_away((b_local.y2 + 1) / t.scale_y - 1) + s.y1)
    return BBox(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2))
