"""World-space rays, axis-aligned boxes, and circular cone-beam scan geometry.

Conventions: isocenter at the centre of the volume bounds, scan circle in the
plane z = isocenter.z, flat-panel detector with u tangent to the circle and v
along +z. All lengths in millimetres.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(a)):
        raise ValueError("vector components must be finite")
    return a


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", _vec3(self.min))
        object.__setattr__(self, "max", _vec3(self.max))
        if np.any(self.min > self.max):
            raise ValueError("Aabb requires min <= max componentwise")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def size(self) -> np.ndarray:
        return self.max - self.min

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.size))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0
    t_max: float = np.inf

    def __post_init__(self):
        object.__setattr__(self, "origin", _vec3(self.origin))
        d = _vec3(self.direction)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "direction", d)
        if self.t_min > self.t_max:
            raise ValueError("ray requires t_min <= t_max")

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class ScanGeometry:
    n_views: int
    source_to_isocenter: float
    source_to_detector: float
    detector_rows: int
    detector_cols: int
    pixel_pitch_u: float
    pixel_pitch_v: float
    volume_bounds: Aabb
    angular_range: float = 2.0 * np.pi

    def view_angle(self, view: int) -> float:
        return self.angular_range * view / self.n_views


def make_circular_geometry(
    n_views: int,
    sid: float,
    sdd: float,
    rows: int,
    cols: int,
    pitch_u: float,
    pitch_v: float,
    bounds: Aabb,
    angular_range: float = 2.0 * np.pi,
) -> ScanGeometry:
    """Uniform circular scan: view k at angle angular_range*k/n_views."""
    if n_views < 1 or rows < 1 or cols < 1:
        raise ValueError("n_views, rows, cols must be >= 1")
    if not (sdd > sid > 0):
        raise ValueError("require sdd > sid > 0")
    if pitch_u <= 0 or pitch_v <= 0:
        raise ValueError("pixel pitches must be > 0")
    return ScanGeometry(
        n_views=int(n_views),
        source_to_isocenter=float(sid),
        source_to_detector=float(sdd),
        detector_rows=int(rows),
        detector_cols=int(cols),
        pixel_pitch_u=float(pitch_u),
        pixel_pitch_v=float(pitch_v),
        volume_bounds=bounds,
        angular_range=float(angular_range),
    )


def view_frame(geom: ScanGeometry, view: int):
    """Source position, detector centre, and detector (u, v) axes for a view."""
    if not (0 <= view < geom.n_views):
        raise ValueError(f"view {view} out of range [0, {geom.n_views})")
    iso = geom.volume_bounds.center
    ang = geom.view_angle(view)
    radial = np.array([np.cos(ang), np.sin(ang), 0.0])
    source = iso + geom.source_to_isocenter * radial
    det_center = iso - (geom.source_to_detector - geom.source_to_isocenter) * radial
    u_axis = np.array([-np.sin(ang), np.cos(ang), 0.0])
    v_axis = np.array([0.0, 0.0, 1.0])
    return source, det_center, u_axis, v_axis


def pixel_centers(geom: ScanGeometry, view: int) -> np.ndarray:
    """(rows*cols, 3) world positions of detector pixel centres, row-major."""
    source, det_center, u_axis, v_axis = view_frame(geom, view)
    rows, cols = geom.detector_rows, geom.detector_cols
    us = (np.arange(cols) - (cols - 1) / 2.0) * geom.pixel_pitch_u
    vs = (np.arange(rows) - (rows - 1) / 2.0) * geom.pixel_pitch_v
    uu, vv = np.meshgrid(us, vs)  # (rows, cols)
    pts = det_center[None, :] + uu.reshape(-1, 1) * u_axis[None, :] + vv.reshape(-1, 1) * v_axis[None, :]
    return pts


def rays_for_view(geom: ScanGeometry, view: int):
    """Batched rays for every pixel of one view.

    Returns (origins (N,3), directions (N,3), t_min (N,), t_max (N,)) with
    t ranges clipped to the volume bounds (t_min = t_max where the ray misses).
    """
    source, _, _, _ = view_frame(geom, view)
    pts = pixel_centers(geom, view)
    dirs = pts - source[None, :]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(source, dirs.shape).copy()
    t_near, t_far, hit = ray_aabb_intersect_batch(origins, dirs, geom.volume_bounds)
    t_near = np.maximum(t_near, 0.0)
    t_min = np.where(hit & (t_far > t_near), t_near, 0.0)
    t_max = np.where(hit & (t_far > t_near), t_far, 0.0)
    return origins, dirs, t_min, t_max


def ray_for_pixel(geom: ScanGeometry, view: int, row: int, col: int) -> Ray:
    """Ray from the view's source through the centre of pixel (row, col)."""
    if not (0 <= row < geom.detector_rows):
        raise ValueError(f"row {row} out of range [0, {geom.detector_rows})")
    if not (0 <= col < geom.detector_cols):
        raise ValueError(f"col {col} out of range [0, {geom.detector_cols})")
    source, det_center, u_axis, v_axis = view_frame(geom, view)
    u = (col - (geom.detector_cols - 1) / 2.0) * geom.pixel_pitch_u
    v = (row - (geom.detector_rows - 1) / 2.0) * geom.pixel_pitch_v
    target = det_center + u * u_axis + v * v_axis
    d = target - source
    d /= np.linalg.norm(d)
    hit = ray_aabb_intersect(Ray(source, d), geom.volume_bounds)
    if hit is None:
        return Ray(source, d, 0.0, 0.0)
    t_near, t_far = hit
    t_near = max(t_near, 0.0)
    if t_far <= t_near:
        return Ray(source, d, 0.0, 0.0)
    return Ray(source, d, t_near, t_far)


def ray_aabb_intersect(ray: Ray, box: Aabb):
    """Slab-method entry/exit parameters, or None if the ray misses the box.

    Zero direction components are treated as inside-the-slab iff the origin
    component lies within the slab, avoiding +/-inf arithmetic.
    """
    t_near, t_far = -np.inf, np.inf
    for a in range(3):
        o, d = ray.origin[a], ray.direction[a]
        if d == 0.0:
            if o < box.min[a] or o > box.max[a]:
                return None
            continue
        t0 = (box.min[a] - o) / d
        t1 = (box.max[a] - o) / d
        if t0 > t1:
            t0, t1 = t1, t0
        t_near = max(t_near, t0)
        t_far = min(t_far, t1)
        if t_near > t_far:
            return None
    if not np.isfinite(t_near):
        # all-axis-parallel cannot happen for unit directions, but an
        # origin-inside degenerate pair of axes leaves one finite slab
        t_near = 0.0
    return float(t_near), float(t_far)


def ray_aabb_intersect_batch(origins: np.ndarray, dirs: np.ndarray, box: Aabb):
    """Vectorized slab test. Returns (t_near, t_far, hit) arrays."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    t_near = np.full(origins.shape[0], -np.inf)
    t_far = np.full(origins.shape[0], np.inf)
    hit = np.ones(origins.shape[0], dtype=bool)
    for a in range(3):
        d = dirs[:, a]
        o = origins[:, a]
        par = d == 0.0
        hit &= ~par | ((o >= box.min[a]) & (o <= box.max[a]))
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (box.min[a] - o) / d
            t1 = (box.max[a] - o) / d
        lo = np.minimum(t0, t1)
        hi = np.maximum(t0, t1)
        t_near = np.where(par, t_near, np.maximum(t_near, lo))
        t_far = np.where(par, t_far, np.minimum(t_far, hi))
    hit &= t_near <= t_far
    t_near = np.where(np.isfinite(t_near), t_near, 0.0)
    return t_near, t_far, hit
