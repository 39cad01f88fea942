"""Burst image denoising with predicted per-pixel multi-size separable kernels."""

__version__ = "0.1.0"
