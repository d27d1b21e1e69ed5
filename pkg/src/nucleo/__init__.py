"""Micro Mask R-CNN for nucleus instance segmentation, in numpy."""

__version__ = "0.1.0"
