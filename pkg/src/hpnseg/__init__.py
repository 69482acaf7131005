"""Dual-phase volumetric segmentation with paired encoder-decoder paths."""

__version__ = "0.1.0"
