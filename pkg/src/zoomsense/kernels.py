"""Kernel backend selection.

Imports the compiled ``_kernels`` extension when it is built, otherwise the
numpy fallback. Set ``ZOOMSENSE_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

if os.environ.get("ZOOMSENSE_PURE_PYTHON"):
    from . import _kernels_py as _impl

    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        from . import _kernels_py as _impl

        BACKEND = "python"

iou_matrix = _impl.iou_matrix
greedy_match = _impl.greedy_match
nms = _impl.nms
box_sums = _impl.box_sums
pl_log_prob = _impl.pl_log_prob
pl_log_prob_grad = _impl.pl_log_prob_grad

__all__ = [
    "BACKEND",
    "iou_matrix",
    "greedy_match",
    "nms",
    "box_sums",
    "pl_log_prob",
    "pl_log_prob_grad",
]
