"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Each row runs one kernel on a workload sized like its use in training or
evaluation, checks that both backends agree, and reports the best-of-N time.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from zoomsense import _kernels_py as py
from zoomsense.geometry import BitMask
from zoomsense.policy import build_anchors

try:
    from zoomsense import _kernels as cy
except ImportError:  # extension not built
    cy = None


def _boxes(rng, n, size=1024, max_side=200):
    x1 = rng.integers(0, size - max_side, n)
    y1 = rng.integers(0, size - max_side, n)
    w = rng.integers(1, max_side, n)
    h = rng.integers(1, max_side, n)
    return np.stack([x1, y1, x1 + w - 1, y1 + h - 1], axis=1).astype(np.int64)


def workloads(rng):
    a, b = _boxes(rng, 64), _boxes(rng, 48)
    iou = py.iou_matrix(a, b)
    cats = rng.integers(0, 3, 64).astype(np.int64)
    gcats = rng.integers(0, 3, 48).astype(np.int64)
    order = np.argsort(-rng.random(64), kind="stable").astype(np.int64)
    nb = _boxes(rng, 300)
    scores = rng.random(300)
    ncats = rng.integers(0, 3, 300).astype(np.int64)
    mask = BitMask(rng.random((256, 256)) < 0.3)
    integral = mask.integral()
    qboxes = _boxes(rng, 238, size=256, max_side=100)
    logits = rng.normal(0, 1, len(build_anchors(1024, 1024)))
    idx = rng.permutation(len(logits))[:3].astype(np.int64)
    return {
        "iou_matrix 64x48": lambda k: k.iou_matrix(a, b),
        "greedy_match 64x48": lambda k: k.greedy_match(iou, cats, gcats, order, 0.5),
        "nms 300 boxes": lambda k: k.nms(nb, scores, ncats, 0.5),
        "box_sums 238 boxes": lambda k: k.box_sums(integral, qboxes),
        "pl_log_prob n=238 k=3": lambda k: k.pl_log_prob(logits, idx),
        "pl_log_prob_grad n=238 k=3": lambda k: k.pl_log_prob_grad(logits, idx),
    }


def _same(x, y) -> bool:
    if isinstance(x, tuple):
        return all(_same(u, v) for u, v in zip(x, y))
    return np.allclose(np.asarray(x, dtype=float), np.asarray(y, dtype=float), rtol=1e-12, atol=1e-12)


def best_time(fn, repeat: int) -> float:
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28} {'python (us)':>12} {'cython (us)':>12} {'speedup':>8}")
    for name, run in workloads(rng).items():
        t_py = best_time(lambda: run(py), args.repeat) * 1e6
        if cy is None:
            print(f"{name:<28} {t_py:12.1f} {'n/a':>12} {'n/a':>8}")
            continue
        if not _same(run(py), run(cy)):
            raise SystemExit(f"{name}: backends disagree")
        t_cy = best_time(lambda: run(cy), args.repeat) * 1e6
        print(f"{name:<28} {t_py:12.1f} {t_cy:12.1f} {t_py / t_cy:7.1f}x")


if __name__ == "__main__":
    main()
