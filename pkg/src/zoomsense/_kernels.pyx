# cython: language_level=3
"""Compiled versions of the kernels in ``_kernels_py``; same signatures and results."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def iou_matrix(a, b):
    cdef const long long[:, :] A = np.ascontiguousarray(a, dtype=np.int64).reshape(-1, 4)
    cdef const long long[:, :] B = np.ascontiguousarray(b, dtype=np.int64).reshape(-1, 4)
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0], i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, :] O = out
    cdef long long iw, ih, inter, area_a, area_b
    for i in range(n):
        area_a = (A[i, 2] - A[i, 0] + 1) * (A[i, 3] - A[i, 1] + 1)
        for j in range(m):
            iw = min(A[i, 2], B[j, 2]) - max(A[i, 0], B[j, 0]) + 1
            if iw <= 0:
                continue
            ih = min(A[i, 3], B[j, 3]) - max(A[i, 1], B[j, 1]) + 1
            if ih <= 0:
                continue
            inter = iw * ih
            area_b = (B[j, 2] - B[j, 0] + 1) * (B[j, 3] - B[j, 1] + 1)
            O[i, j] = <double>inter / <double>(area_a + area_b - inter)
    return out


def greedy_match(iou, pred_cats, gt_cats, order, double thr):
    cdef const double[:, :] I = np.ascontiguousarray(iou, dtype=np.float64)
    cdef const long long[:] pc = np.ascontiguousarray(pred_cats, dtype=np.int64)
    cdef const long long[:] gc = np.ascontiguousarray(gt_cats, dtype=np.int64)
    cdef const long long[:] od = np.ascontiguousarray(order, dtype=np.int64)
    cdef Py_ssize_t n = I.shape[0], m = I.shape[1], k, i, j, best
    cdef double v, best_iou
    matched = np.full(n, -1, dtype=np.int64)
    cdef long long[:] M = matched
    taken_arr = np.zeros(m, dtype=np.uint8)
    cdef unsigned char[:] taken = taken_arr
    for k in range(od.shape[0]):
        i = od[k]
        best = -1
        best_iou = thr
        for j in range(m):
            if taken[j] or gc[j] != pc[i]:
                continue
            v = I[i, j]
            if v >= best_iou and (best < 0 or v > best_iou):
                best = j
                best_iou = v
        if best >= 0:
            M[i] = best
            taken[best] = 1
    return matched


def nms(boxes, scores, cats, double thr):
    b = np.ascontiguousarray(boxes, dtype=np.int64).reshape(-1, 4)
    cdef const long long[:, :] B = b
    cdef const long long[:] C = np.ascontiguousarray(cats, dtype=np.int64)
    cdef const long long[:] od = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable").astype(np.int64)
    cdef Py_ssize_t n = B.shape[0], a, c, i, j
    dropped_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[:] dropped = dropped_arr
    keep = np.empty(n, dtype=np.int64)
    cdef long long[:] K = keep
    cdef Py_ssize_t nk = 0
    cdef long long iw, ih, inter, ai, aj
    for a in range(n):
        i = od[a]
        if dropped[i]:
            continue
        K[nk] = i
        nk += 1
        ai = (B[i, 2] - B[i, 0] + 1) * (B[i, 3] - B[i, 1] + 1)
        for c in range(a + 1, n):
            j = od[c]
            if dropped[j] or C[j] != C[i]:
                continue
            iw = min(B[i, 2], B[j, 2]) - max(B[i, 0], B[j, 0]) + 1
            ih = min(B[i, 3], B[j, 3]) - max(B[i, 1], B[j, 1]) + 1
            if iw <= 0 or ih <= 0:
                continue
            inter = iw * ih
            aj = (B[j, 2] - B[j, 0] + 1) * (B[j, 3] - B[j, 1] + 1)
            if <double>inter / <double>(ai + aj - inter) > thr:
                dropped[j] = 1
    return keep[:nk].copy()


def box_sums(integral, boxes):
    cdef const long long[:, :] S = np.ascontiguousarray(integral, dtype=np.int64)
    cdef const long long[:, :] B = np.ascontiguousarray(boxes, dtype=np.int64).reshape(-1, 4)
    cdef Py_ssize_t n = B.shape[0], i
    out = np.empty(n, dtype=np.int64)
    cdef long long[:] O = out
    cdef Py_ssize_t x1, y1, x2, y2
    for i in range(n):
        x1 = B[i, 0]
        y1 = B[i, 1]
        x2 = B[i, 2] + 1
        y2 = B[i, 3] + 1
        O[i] = S[y2, x2] - S[y1, x2] - S[y2, x1] + S[y1, x1]
    return out


cdef double _step(const double[:] L, unsigned char[:] alive, double[:] G, Py_ssize_t c, bint want_grad):
    cdef Py_ssize_t n = L.shape[0], j
    cdef double m = -1e308, z = 0.0, e
    for j in range(n):
        if alive[j] and L[j] > m:
            m = L[j]
    for j in range(n):
        if alive[j]:
            z += exp(L[j] - m)
    if want_grad:
        for j in range(n):
            if alive[j]:
                G[j] -= exp(L[j] - m) / z
        G[c] += 1.0
    return L[c] - (m + log(z))


def pl_log_prob(logits, idx):
    cdef const double[:] L = np.ascontiguousarray(logits, dtype=np.float64)
    cdef const long long[:] I = np.ascontiguousarray(idx, dtype=np.int64)
    alive_arr = np.ones(L.shape[0], dtype=np.uint8)
    cdef unsigned char[:] alive = alive_arr
    cdef double[:] G = np.zeros(1)
    cdef double total = 0.0
    cdef Py_ssize_t k
    for k in range(I.shape[0]):
        total += _step(L, alive, G, I[k], False)
        alive[I[k]] = 0
    return total


def pl_log_prob_grad(logits, idx):
    cdef const double[:] L = np.ascontiguousarray(logits, dtype=np.float64)
    cdef const long long[:] I = np.ascontiguousarray(idx, dtype=np.int64)
    alive_arr = np.ones(L.shape[0], dtype=np.uint8)
    cdef unsigned char[:] alive = alive_arr
    grad = np.zeros(L.shape[0], dtype=np.float64)
    cdef double[:] G = grad
    cdef double total = 0.0
    cdef Py_ssize_t k
    for k in range(I.shape[0]):
        total += _step(L, alive, G, I[k], True)
        alive[I[k]] = 0
    return total, grad
