"""Differentiable 4D Gaussian splatting with dual-scale motion deformation."""

__version__ = "0.1.0"
