"""Zoom-in sensing policies trained with group-relative policy optimization.

A sensing policy looks at a scene's global view and proposes up to ``k``
regions to zoom into; a task model then runs on each crop. Rewards combine
proposal-structure heuristics with the task model's detection or
segmentation quality.
"""
from .geometry import BBox, BitMask, CropTransform, GeometryError
from .kernels import BACKEND

__all__ = ["BBox", "BitMask", "CropTransform", "GeometryError", "BACKEND"]
__version__ = "0.1.0"
