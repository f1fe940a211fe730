"""Laplace-Beltrami operators and spectral tools for 3D Gaussian splatting."""

__version__ = "0.1.0"
