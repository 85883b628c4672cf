"""Desk-scale panoptic segmentation lab.

Framework-free building blocks: a minimal autodiff tensor core, RoI
resampling (align + inverse-bilinear upsample), background-guiding attention
blocks, the panoptic-quality metric, instance/semantic fusion, a synthetic
scene generator with COCO-panoptic i/o, and a small training harness wired
through a CLI.
"""

from .tensor import Param, Tensor, grad_check
from .panoptic import Categories, CategoryMeta, PanopticMap, VOID
from .roi import MaskPatch, RoI, assign_scale, inverse_bilinear_weights

__all__ = [
    "Param", "Tensor", "grad_check",
    "Categories", "CategoryMeta", "PanopticMap", "VOID",
    "MaskPatch", "RoI", "assign_scale", "inverse_bilinear_weights",
]

__version__ = "0.1.0"
