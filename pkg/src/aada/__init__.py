"""Adversarial appearance adaptation for semantic segmentation of rasters."""

__version__ = "0.1.0"
