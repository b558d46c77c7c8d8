"""SART baseline: relaxed, normalized backprojection of projection residuals
over the matched forward/adjoint projector pair.

Updates are accumulated per sweep (simultaneous variant), so the result does
not depend on view processing order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .phantom import Volume
from .projector import ProjectionSet, backproject, default_step, forward_project

EPS = 1e-8


@dataclass
class SartConfig:
    iterations: int = 20
    relaxation: float = 1.0
    nonneg_clamp: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not (0.0 < self.relaxation < 2.0):
            raise ValueError("relaxation must be in (0, 2)")


def _normalizers(geom, dims, spacing, origin, step):
    """Per-pixel ray weights (forward of ones) and per-voxel weights
    (backprojection of ones)."""
    ones_vol = Volume(np.ones(dims), spacing, origin)
    row_sum = forward_project(ones_vol, geom, step).images
    ones_proj = ProjectionSet(geom, np.ones_like(row_sum))
    col_sum = backproject(ones_proj, dims, spacing, origin, step).data
    return row_sum, col_sum


def sart_iterate(
    x: Volume,
    p: ProjectionSet,
    cfg: SartConfig,
    step: float | None = None,
    row_sum: np.ndarray | None = None,
    col_sum: np.ndarray | None = None,
) -> Volume:
    """One full sweep over all views."""
    if step is None:
        step = default_step(x.spacing)
    geom = p.geom
    if row_sum is None or col_sum is None:
        row_sum, col_sum = _normalizers(geom, x.dims, x.spacing, x.origin, step)
    simulated = forward_project(x, geom, step).images
    residual = (p.images - simulated) / (row_sum + EPS)
    residual[row_sum <= EPS] = 0.0
    update = backproject(ProjectionSet(geom, residual), x.dims, x.spacing, x.origin, step).data
    new = x.data + cfg.relaxation * update / (col_sum + EPS)
    if cfg.nonneg_clamp:
        np.maximum(new, 0.0, out=new)
    return Volume(new, x.spacing, x.origin)


def sart_reconstruct(
    p: ProjectionSet,
    dims,
    spacing,
    origin,
    cfg: SartConfig,
    step: float | None = None,
) -> Volume:
    """cfg.iterations sweeps from a zero initial volume."""
    dims = np.atleast_1d(np.asarray(dims, dtype=int))
    if dims.size == 1:
        dims = np.repeat(dims, 3)
    dims = tuple(int(d) for d in dims)
    spacing = np.asarray(spacing, dtype=np.float64).reshape(3)
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    if step is None:
        step = default_step(spacing)
    row_sum, col_sum = _normalizers(p.geom, dims, spacing, origin, step)
    x = Volume(np.zeros(dims), spacing, origin)
    for _ in range(cfg.iterations):
        x = sart_iterate(x, p, cfg, step=step, row_sum=row_sum, col_sum=col_sum)
    return x
