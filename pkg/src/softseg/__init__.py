"""Soft-label training and evaluation for 2D U-Net segmentation."""

__version__ = "0.1.0"
