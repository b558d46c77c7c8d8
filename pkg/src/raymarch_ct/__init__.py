"""Sparse-view cone-beam CT reconstruction toolkit: density-driven hybrid
ray sampling, a ray-attention neural density field, a Beer-Lambert projector
with matched adjoint, a SART baseline, and volume quality metrics."""

__version__ = "0.1.0"
