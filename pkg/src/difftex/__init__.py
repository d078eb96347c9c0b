"""Differentiable multi-view texture blending for planar proxy models."""

__version__ = "0.1.0"
