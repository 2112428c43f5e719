"""Hierarchical multiclass segmentation toolkit for occlusal contact masks."""

from hierseg.hierarchy import ClassHierarchy, build_hierarchy, default_occlusal_hierarchy
from hierseg.loss import LossConfig, combined_loss, combined_loss_grad

__all__ = [
    "ClassHierarchy",
    "LossConfig",
    "build_hierarchy",
    "combined_loss",
    "combined_loss_grad",
    "default_occlusal_hierarchy",
]

__version__ = "0.1.0"
