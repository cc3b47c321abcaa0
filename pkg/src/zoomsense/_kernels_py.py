"""Numpy reference versions of the hot kernels.

Every function here has a twin with the same signature in the compiled
``_kernels`` extension. Boxes are ``int64`` arrays of shape ``(n, 4)`` holding
inclusive ``x1, y1, x2, y2`` pixel corners.
"""
from __future__ import annotations

import numpy as np


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.int64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.float64)
    area_a = (a[:, 2] - a[:, 0] + 1) * (a[:, 3] - a[:, 1] + 1)
    area_b = (b[:, 2] - b[:, 0] + 1) * (b[:, 3] - b[:, 1] + 1)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]) + 1
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]) + 1
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def greedy_match(
    iou: np.ndarray,
    pred_cats: np.ndarray,
    gt_cats: np.ndarray,
    order: np.ndarray,
    thr: float,
) -> np.ndarray:
    """Match predictions (visited in ``order``) to the best free same-category gt.

    Ties on IoU go to the lowest gt index. Returns the gt index per
    prediction, ``-1`` when unmatched.
    """
    n, m = iou.shape
    matched = np.full(n, -1, dtype=np.int64)
    taken = np.zeros(m, dtype=bool)
    for i in order:
        best = -1
        best_iou = thr
        for j in range(m):
            if taken[j] or gt_cats[j] != pred_cats[i]:
                continue
            v = iou[i, j]
            if v >= best_iou and (best < 0 or v > best_iou):
                best = j
                best_iou = v
        if best >= 0:
            matched[i] = best
            taken[best] = True
    return matched


def nms(boxes: np.ndarray, scores: np.ndarray, cats: np.ndarray, thr: float) -> np.ndarray:
    """Per-category NMS; a box is dropped when IoU with a kept box exceeds ``thr``."""
    boxes = np.asarray(boxes, dtype=np.int64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    iou = iou_matrix(boxes, boxes)
    keep = []
    dropped = np.zeros(len(boxes), dtype=bool)
    for i in order:
        if dropped[i]:
            continue
        keep.append(i)
        same = (cats == cats[i]) & (iou[i] > thr)
        same[i] = False
        dropped |= same
    return np.asarray(keep, dtype=np.int64)


def box_sums(integral: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Set-pixel counts inside each box from a ``(H+1, W+1)`` summed-area table."""
    b = np.asarray(boxes, dtype=np.int64).reshape(-1, 4)
    x1, y1, x2, y2 = b[:, 0], b[:, 1], b[:, 2] + 1, b[:, 3] + 1
    return integral[y2, x2] - integral[y1, x2] - integral[y2, x1] + integral[y1, x1]


def _logsumexp(v: np.ndarray) -> float:
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))


def pl_log_prob(logits: np.ndarray, idx: np.ndarray) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    alive = np.ones(len(logits), dtype=bool)
    total = 0.0
    for c in idx:
        total += logits[c] - _logsumexp(logits[alive])
        alive[c] = False
    return total


def pl_log_prob_grad(logits: np.ndarray, idx: np.ndarray) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    alive = np.ones(len(logits), dtype=bool)
    grad = np.zeros(len(logits))
    total = 0.0
    for c in idx:
        sub = logits[alive]
        m = sub.max()
        e = np.where(alive, np.exp(logits - m), 0.0)
        z = e.sum()
        total += logits[c] - (m + np.log(z))
        grad -= e / z
        grad[c] += 1.0
        alive[c] = False
    return total, grad
