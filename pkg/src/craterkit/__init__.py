"""Crater-detection pipeline toolkit.

Geometry, padded Hungarian matching, contrastive/box losses, a LoRA toy
detector, IMPACT-style dataset preprocessing, Table-1 augmentation policies
and the recall/precision evaluation harness.
"""
from .lap import solver_backend

__version__ = "0.1.0"

__all__ = ["solver_backend", "__version__"]
