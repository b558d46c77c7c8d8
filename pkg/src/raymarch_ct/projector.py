"""Beer-Lambert forward projector (line integrals of attenuation) and its
exact adjoint, plus Poisson projection noise.

Forward and adjoint share the same quadrature points and weights, so the
inner-product identity <Ax, y> = <x, A^T y> holds to summation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Ray, ScanGeometry, rays_for_view
from .phantom import Volume, sample_trilinear_batch
from .prng import Pcg32

_PIXEL_CHUNK = 8192


@dataclass
class ProjectionSet:
    """Per-view line-integral images, shape (n_views, rows, cols)."""

    geom: ScanGeometry
    images: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        expect = (self.geom.n_views, self.geom.detector_rows, self.geom.detector_cols)
        if self.images.shape != expect:
            raise ValueError(f"images shape {self.images.shape} != {expect}")


def default_step(spacing) -> float:
    return 0.5 * float(np.min(spacing))


def _quadrature(t_min: np.ndarray, t_max: np.ndarray, step: float):
    """Midpoint-rule abscissae/weights for a batch of parameter ranges.

    Returns (t (N, S), w (N, S)); the last partial step is weighted by its
    own length.
    """
    lengths = np.maximum(t_max - t_min, 0.0)
    n_full = np.floor(lengths / step).astype(np.int64)
    rem = lengths - n_full * step
    tiny = rem < 1e-12 * max(step, 1.0)
    rem = np.where(tiny, 0.0, rem)
    s_max = int(n_full.max()) + 1 if len(n_full) else 1
    j = np.arange(s_max)[None, :]
    t = t_min[:, None] + (j + 0.5) * step
    w = np.where(j < n_full[:, None], step, 0.0)
    at_rem = j == n_full[:, None]
    t = np.where(at_rem, t_min[:, None] + n_full[:, None] * step + 0.5 * rem[:, None], t)
    w = np.where(at_rem, rem[:, None], w)
    return t, w


def project_ray(vol: Volume, ray: Ray, step: float) -> float:
    """Midpoint-rule line integral of the volume along one ray."""
    if step <= 0:
        raise ValueError("step must be > 0")
    if ray.t_max <= ray.t_min:
        return 0.0
    t, w = _quadrature(np.array([ray.t_min]), np.array([ray.t_max]), step)
    pts = ray.origin[None, :] + t.reshape(-1, 1) * ray.direction[None, :]
    vals = sample_trilinear_batch(vol, pts)
    return float(np.sum(vals * w.ravel()))


def forward_project(vol: Volume, geom: ScanGeometry, step: float | None = None) -> ProjectionSet:
    """Line integrals for every (view, pixel)."""
    if step is None:
        step = default_step(vol.spacing)
    if step <= 0:
        raise ValueError("step must be > 0")
    rows, cols = geom.detector_rows, geom.detector_cols
    images = np.zeros((geom.n_views, rows, cols), dtype=np.float64)
    for view in range(geom.n_views):
        origins, dirs, t_min, t_max = rays_for_view(geom, view)
        flat = np.zeros(rows * cols, dtype=np.float64)
        for lo in range(0, rows * cols, _PIXEL_CHUNK):
            hi = min(lo + _PIXEL_CHUNK, rows * cols)
            t, w = _quadrature(t_min[lo:hi], t_max[lo:hi], step)
            pts = origins[lo:hi, None, :] + t[:, :, None] * dirs[lo:hi, None, :]
            vals = sample_trilinear_batch(vol, pts.reshape(-1, 3)).reshape(t.shape)
            flat[lo:hi] = np.sum(vals * w, axis=1)
        images[view] = flat.reshape(rows, cols)
    return ProjectionSet(geom, images)


def _deposit(acc: np.ndarray, pts: np.ndarray, weights: np.ndarray, spacing, origin):
    """Scatter trilinear deposits into a flat (nx*ny*nz) accumulator."""
    nx, ny, nz = acc.shape
    g = (pts - origin[None, :]) / spacing[None, :]
    c0 = np.floor(g).astype(np.int64)
    f = g - c0
    flat = acc.reshape(-1)
    for ox in (0, 1):
        wx = (1.0 - f[:, 0]) if ox == 0 else f[:, 0]
        ix = c0[:, 0] + ox
        for oy in (0, 1):
            wy = (1.0 - f[:, 1]) if oy == 0 else f[:, 1]
            iy = c0[:, 1] + oy
            for oz in (0, 1):
                wz = (1.0 - f[:, 2]) if oz == 0 else f[:, 2]
                iz = c0[:, 2] + oz
                ok = (
                    (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
                )
                idx = (ix[ok] * ny + iy[ok]) * nz + iz[ok]
                w = weights[ok] * wx[ok] * wy[ok] * wz[ok]
                flat += np.bincount(idx, weights=w, minlength=flat.size)


def backproject(
    p: ProjectionSet, dims, spacing, origin, step: float | None = None
) -> Volume:
    """Exact adjoint of forward_project at the same step."""
    spacing = np.asarray(spacing, dtype=np.float64).reshape(3)
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    dims = tuple(int(d) for d in np.atleast_1d(dims)) if np.ndim(dims) else (int(dims),) * 3
    if len(dims) == 1:
        dims = dims * 3
    if step is None:
        step = default_step(spacing)
    geom = p.geom
    acc = np.zeros(dims, dtype=np.float64)
    rows, cols = geom.detector_rows, geom.detector_cols
    for view in range(geom.n_views):
        origins, dirs, t_min, t_max = rays_for_view(geom, view)
        pvals = p.images[view].reshape(-1)
        for lo in range(0, rows * cols, _PIXEL_CHUNK):
            hi = min(lo + _PIXEL_CHUNK, rows * cols)
            t, w = _quadrature(t_min[lo:hi], t_max[lo:hi], step)
            pts = origins[lo:hi, None, :] + t[:, :, None] * dirs[lo:hi, None, :]
            weights = (w * pvals[lo:hi, None]).reshape(-1)
            nz_mask = weights != 0.0
            _deposit(acc, pts.reshape(-1, 3)[nz_mask], weights[nz_mask], spacing, origin)
    return Volume(acc, spacing, origin)


def add_noise(p: ProjectionSet, photon_count: float, rng: Pcg32) -> ProjectionSet:
    """Poisson photon noise: q -> -ln(max(Poisson(I0*exp(-q)), 1)/I0)."""
    if photon_count <= 0:
        raise ValueError("photon_count must be > 0")
    gen = np.random.Generator(np.random.PCG64(rng.next_u64()))
    intensity = photon_count * np.exp(-p.images)
    sampled = gen.poisson(intensity).astype(np.float64)
    noisy = -np.log(np.maximum(sampled, 1.0) / photon_count)
    return ProjectionSet(p.geom, noisy)
