"""Voxel volumes of attenuation coefficients and procedural ground-truth phantoms.

Voxel values live at cell centres; sampling outside the centre lattice
zero-pads (objects are surrounded by air).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Aabb

DEFAULT_BOUNDS = Aabb(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))


@dataclass
class Volume:
    """Dense scalar field on a regular grid.

    data has shape (nx, ny, nz); serialization flattens x-fastest.
    origin is the world position of voxel (0, 0, 0)'s centre.
    """

    data: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.data.ndim != 3:
            raise ValueError("volume data must be 3-D")
        if np.any(self.spacing <= 0):
            raise ValueError("spacing must be positive")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def bounds(self) -> Aabb:
        lo = self.origin - 0.5 * self.spacing
        hi = self.origin + (np.array(self.dims) - 0.5) * self.spacing
        return Aabb(lo, hi)

    def voxel_centers(self) -> np.ndarray:
        """(nx*ny*nz, 3) world positions, x-fastest order."""
        nx, ny, nz = self.dims
        ix, iy, iz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        idx = np.stack(
            [ix.ravel(order="F"), iy.ravel(order="F"), iz.ravel(order="F")], axis=1
        )
        return self.origin[None, :] + idx * self.spacing[None, :]


@dataclass
class Ellipsoid:
    center: np.ndarray
    semi_axes: np.ndarray
    rotation_z: float
    density_delta: float


@dataclass
class PhantomSpec:
    bounds: Aabb
    ellipsoids: list[Ellipsoid]


def _grid_points(bounds: Aabb, dims, spacing):
    dims = np.asarray(dims, dtype=int)
    spacing = np.asarray(spacing, dtype=np.float64).reshape(3)
    origin = bounds.center - 0.5 * (dims - 1) * spacing
    xs = origin[0] + np.arange(dims[0]) * spacing[0]
    ys = origin[1] + np.arange(dims[1]) * spacing[1]
    zs = origin[2] + np.arange(dims[2]) * spacing[2]
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    return gx, gy, gz, origin, spacing


def gen_phantom(spec: PhantomSpec, dims, spacing=None) -> Volume:
    """Additive ellipsoid composition sampled at voxel centres, clamped >= 0."""
    dims = np.asarray(dims, dtype=int)
    if np.any(dims < 1):
        raise ValueError("dims must be >= 1")
    if spacing is None:
        spacing = spec.bounds.size / dims
    gx, gy, gz, origin, spacing = _grid_points(spec.bounds, dims, spacing)
    vol = np.zeros(tuple(dims), dtype=np.float64)
    for e in spec.ellipsoids:
        c = np.asarray(e.center, dtype=np.float64)
        ax = np.asarray(e.semi_axes, dtype=np.float64)
        if np.any(ax <= 0):
            raise ValueError("ellipsoid semi-axes must be positive")
        dx, dy, dz = gx - c[0], gy - c[1], gz - c[2]
        cr, sr = np.cos(e.rotation_z), np.sin(e.rotation_z)
        qx = cr * dx + sr * dy
        qy = -sr * dx + cr * dy
        inside = (qx / ax[0]) ** 2 + (qy / ax[1]) ** 2 + (dz / ax[2]) ** 2 <= 1.0
        vol += np.where(inside, e.density_delta, 0.0)
    np.maximum(vol, 0.0, out=vol)
    return Volume(vol, spacing, origin)


# Modified 3-D Shepp-Logan ellipsoid table: (a, b, c, x0, y0, z0, phi_deg, delta)
SHEPP_LOGAN_3D = [
    (0.69, 0.92, 0.81, 0.0, 0.0, 0.0, 0.0, 1.0),
    (0.6624, 0.874, 0.78, 0.0, -0.0184, 0.0, 0.0, -0.8),
    (0.11, 0.31, 0.22, 0.22, 0.0, 0.0, -18.0, -0.2),
    (0.16, 0.41, 0.28, -0.22, 0.0, 0.0, 18.0, -0.2),
    (0.21, 0.25, 0.41, 0.0, 0.35, -0.15, 0.0, 0.1),
    (0.046, 0.046, 0.05, 0.0, 0.1, 0.25, 0.0, 0.1),
    (0.046, 0.046, 0.05, 0.0, -0.1, 0.25, 0.0, 0.1),
    (0.046, 0.023, 0.05, -0.08, -0.605, 0.0, 0.0, 0.1),
    (0.023, 0.023, 0.02, 0.0, -0.606, 0.0, 0.0, 0.1),
    (0.023, 0.046, 0.02, 0.06, -0.605, 0.0, 0.0, 0.1),
]

# Three disjoint axis-aligned boxes: (xlo, xhi, ylo, yhi, zlo, zhi, density)
BLOCKS_BOXES = [
    (-0.65, -0.15, -0.65, -0.15, -0.5, 0.5, 0.3),
    (0.15, 0.65, -0.65, -0.15, -0.5, 0.5, 0.6),
    (-0.25, 0.25, 0.15, 0.65, -0.5, 0.5, 1.0),
]


def shepp_logan_spec(bounds: Aabb = DEFAULT_BOUNDS) -> PhantomSpec:
    ells = [
        Ellipsoid(
            center=np.array([x0, y0, z0]),
            semi_axes=np.array([a, b, c]),
            rotation_z=np.deg2rad(phi),
            density_delta=delta,
        )
        for a, b, c, x0, y0, z0, phi, delta in SHEPP_LOGAN_3D
    ]
    return PhantomSpec(bounds, ells)


def _blocks_volume(dims) -> Volume:
    gx, gy, gz, origin, spacing = _grid_points(DEFAULT_BOUNDS, dims, DEFAULT_BOUNDS.size / dims)
    vol = np.zeros(tuple(dims), dtype=np.float64)
    for xlo, xhi, ylo, yhi, zlo, zhi, dens in BLOCKS_BOXES:
        inside = (
            (gx >= xlo) & (gx <= xhi) & (gy >= ylo) & (gy <= yhi) & (gz >= zlo) & (gz <= zhi)
        )
        vol = np.where(inside, dens, vol)
    return Volume(vol, spacing, origin)


def _jaw_volume(dims) -> Volume:
    """U-shaped dental arch (0.8) with 8 teeth (1.0), soft interior (0.2),
    inside a faint tissue shell (0.05)."""
    gx, gy, gz, origin, spacing = _grid_points(DEFAULT_BOUNDS, dims, DEFAULT_BOUNDS.size / dims)
    vol = np.zeros(tuple(dims), dtype=np.float64)

    # tissue shell: large ellipsoid
    shell = (gx / 0.9) ** 2 + (gy / 0.9) ** 2 + (gz / 0.75) ** 2 <= 1.0
    vol = np.where(shell, 0.05, vol)

    # arch: annulus 0.45 <= r <= 0.65 opening toward -y, limited height
    r = np.sqrt(gx**2 + gy**2)
    in_u = gy > -0.15
    arch_h = np.abs(gz) <= 0.35
    interior = (r < 0.45) & in_u & arch_h & shell
    vol = np.where(interior, 0.2, vol)
    arch = (r >= 0.45) & (r <= 0.65) & in_u & arch_h
    vol = np.where(arch, 0.8, vol)

    # 8 teeth: upright capsules (elongated ellipsoids) on the mid-arch circle
    tooth_angles = np.deg2rad(np.linspace(20.0, 160.0, 8))
    for ang in tooth_angles:
        cx, cy = 0.55 * np.cos(ang), 0.55 * np.sin(ang)
        tooth = ((gx - cx) / 0.07) ** 2 + ((gy - cy) / 0.07) ** 2 + (gz / 0.22) ** 2 <= 1.0
        vol = np.where(tooth, 1.0, vol)
    return Volume(vol, spacing, origin)


def builtin_phantom(name: str, dims) -> Volume:
    """Named ground-truth scenes: 'jaw', 'shepp3d', or 'blocks'."""
    dims = np.asarray(dims, dtype=int)
    if dims.ndim == 0:
        dims = np.array([int(dims)] * 3)
    if np.any(dims < 1):
        raise ValueError("dims must be >= 1")
    if name == "blocks":
        return _blocks_volume(dims)
    if name == "jaw":
        return _jaw_volume(dims)
    if name == "shepp3d":
        return gen_phantom(shepp_logan_spec(), dims)
    raise ValueError(f"unknown phantom name {name!r}; expected jaw, shepp3d, or blocks")


def sample_trilinear_batch(vol: Volume, pts: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at (N, 3) world points, zero-padded outside."""
    pts = np.asarray(pts, dtype=np.float64)
    g = (pts - vol.origin[None, :]) / vol.spacing[None, :]
    c0 = np.floor(g).astype(np.int64)
    f = g - c0
    nx, ny, nz = vol.dims
    out = np.zeros(pts.shape[0], dtype=np.float64)
    for ox in (0, 1):
        wx = (1.0 - f[:, 0]) if ox == 0 else f[:, 0]
        ix = c0[:, 0] + ox
        okx = (ix >= 0) & (ix < nx)
        for oy in (0, 1):
            wy = (1.0 - f[:, 1]) if oy == 0 else f[:, 1]
            iy = c0[:, 1] + oy
            oky = okx & (iy >= 0) & (iy < ny)
            for oz in (0, 1):
                wz = (1.0 - f[:, 2]) if oz == 0 else f[:, 2]
                iz = c0[:, 2] + oz
                ok = oky & (iz >= 0) & (iz < nz)
                w = wx * wy * wz
                vals = np.zeros_like(out)
                vals[ok] = vol.data[ix[ok], iy[ok], iz[ok]]
                out += w * vals
    return out


def sample_trilinear(vol: Volume, p) -> float:
    return float(sample_trilinear_batch(vol, np.asarray(p, dtype=np.float64).reshape(1, 3))[0])
