"""Density-driven hybrid ray sampling.

Pipeline per ray: occupancy-grid traversal with empty-interval skipping,
stratified coarse samples over the occupied arc length, a normalized density
PDF over the coarse strata, and systematic fine resampling

    t'_{i,k} = z_i + frac(v + k/N2) * (z_{i+1} - z_i)

with one shared offset v per ray. Fine placement runs in arc-length
coordinates (where the stratum edges are equispaced) and is mapped back
through the interval union, so every sample lands inside an occupied
interval even when the union has gaps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import Aabb, Ray
from .prng import Pcg32, batch_uniforms

PDF_FLOOR = 1e-8
# positions exactly on a CDF boundary belong to the upper segment; the
# tolerance keeps that true under cumsum rounding noise
CDF_TIE_EPS = 1e-12


@dataclass
class OccupancyGrid:
    res: tuple[int, int, int]
    bounds: Aabb
    occupancy: np.ndarray  # bool, shape res
    ema_density: np.ndarray  # float, shape res
    tau: float = 0.0

    @classmethod
    def initial(cls, res, bounds: Aabb) -> "OccupancyGrid":
        """Fully occupied grid used before any field training."""
        res = tuple(int(r) for r in np.atleast_1d(res))
        if len(res) == 1:
            res = res * 3
        ema = np.ones(res, dtype=np.float64)
        return cls(res, bounds, np.ones(res, dtype=bool), ema, tau=0.0)

    @property
    def cell_size(self) -> np.ndarray:
        return self.bounds.size / np.array(self.res, dtype=np.float64)

    def cell_centers(self) -> np.ndarray:
        gx, gy, gz = self.res
        ix, iy, iz = np.meshgrid(np.arange(gx), np.arange(gy), np.arange(gz), indexing="ij")
        idx = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)
        return self.bounds.min[None, :] + (idx + 0.5) * self.cell_size[None, :]


def build_occupancy(
    density_query,
    res,
    bounds: Aabb,
    tau: float,
    ema: float,
    rng: Pcg32 | None = None,
    prev: OccupancyGrid | None = None,
) -> OccupancyGrid:
    """One occupancy refresh: EMA-fold queried densities, threshold at tau.

    density_query maps (N, 3) world points to (N,) densities. Starts from a
    fully occupied grid when prev is None. With an rng, each cell is also
    probed at one jittered point and the max of the two probes is folded in.
    """
    if not (0.0 < ema <= 1.0):
        raise ValueError("ema factor must be in (0, 1]")
    if tau < 0.0:
        raise ValueError("tau must be >= 0")
    grid = prev if prev is not None else OccupancyGrid.initial(res, bounds)
    centers = grid.cell_centers()
    probed = np.asarray(density_query(centers), dtype=np.float64)
    if rng is not None:
        jitter = batch_uniforms(rng.next_u64(), np.arange(len(centers), dtype=np.uint64), 3) - 0.5
        pts = centers + jitter * grid.cell_size[None, :]
        probed = np.maximum(probed, np.asarray(density_query(pts), dtype=np.float64))
    # ema is the weight on history: the grid tracks the current field closely
    # so pruning can act within a few refreshes
    ema_density = ema * grid.ema_density.reshape(-1) + (1.0 - ema) * probed
    ema_density = ema_density.reshape(grid.res)
    # conservative one-cell dilation: density ramps straddling a cell face
    # would otherwise lose their outer tail to pruning and never be sampled
    occupancy = ndimage.binary_dilation(ema_density > tau)
    return OccupancyGrid(grid.res, grid.bounds, occupancy, ema_density, tau=tau)


def _dda_setup(grid: OccupancyGrid, origins, dirs, t0, t1):
    """Common DDA state: start cell, per-axis step, tMax, tDelta."""
    cell_size = grid.cell_size
    res = np.array(grid.res)
    start = origins + t0[..., None] * dirs
    g = (start - grid.bounds.min) / cell_size
    cell = np.clip(np.floor(g).astype(np.int64), 0, res - 1)
    step = np.where(dirs > 0, 1, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta = np.abs(cell_size / dirs)
        next_bound = grid.bounds.min + (cell + (step > 0)) * cell_size
        t_max = t0[..., None] + (next_bound - start) / dirs
    par = dirs == 0.0
    t_max = np.where(par, np.inf, t_max)
    t_delta = np.where(par, np.inf, t_delta)
    return cell, step, t_max, t_delta


def traverse_occupied(grid: OccupancyGrid, ray: Ray) -> list[tuple[float, float]]:
    """Amanatides-Woo walk; consecutive occupied cells merged into intervals."""
    from .geometry import ray_aabb_intersect

    hit = ray_aabb_intersect(ray, grid.bounds)
    if hit is None:
        return []
    t0 = max(hit[0], ray.t_min, 0.0)
    t1 = min(hit[1], ray.t_max)
    if t1 <= t0:
        return []
    o = ray.origin[None, :]
    d = ray.direction[None, :]
    cell, step, t_max, t_delta = _dda_setup(grid, o, d, np.array([t0]), np.array([t1]))
    cell, step = cell[0], step[0]
    t_max, t_delta = t_max[0], t_delta[0]
    res = np.array(grid.res)
    intervals: list[tuple[float, float]] = []
    t_cur = t0
    while t_cur < t1 - 1e-15:
        axis = int(np.argmin(t_max))
        t_next = min(float(t_max[axis]), t1)
        if grid.occupancy[cell[0], cell[1], cell[2]] and t_next > t_cur:
            if intervals and abs(intervals[-1][1] - t_cur) < 1e-12:
                intervals[-1] = (intervals[-1][0], t_next)
            else:
                intervals.append((t_cur, t_next))
        t_cur = t_next
        cell[axis] += step[axis]
        if cell[axis] < 0 or cell[axis] >= res[axis]:
            break
        t_max[axis] += t_delta[axis]
    return intervals


def traverse_occupied_batch(grid: OccupancyGrid, origins, dirs, t_min, t_max_ray):
    """Vectorized DDA over a ray batch.

    Returns per-cell pieces (t_enter, t_exit, occupied, valid), each of shape
    (n_rays, max_steps); consecutive occupied pieces are left unmerged (the
    arc-length machinery downstream is insensitive to merging).
    """
    from .geometry import ray_aabb_intersect_batch

    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = origins.shape[0]
    tn, tf, hit = ray_aabb_intersect_batch(origins, dirs, grid.bounds)
    t0 = np.maximum(np.maximum(tn, t_min), 0.0)
    t1 = np.minimum(tf, t_max_ray)
    alive = hit & (t1 > t0)
    t0 = np.where(alive, t0, 0.0)
    t1 = np.where(alive, t1, 0.0)

    cell, step, t_max, t_delta = _dda_setup(grid, origins, dirs, t0, t1)
    res = np.array(grid.res)
    max_steps = int(res.sum()) + 3
    ent = np.zeros((n, max_steps))
    exi = np.zeros((n, max_steps))
    occ = np.zeros((n, max_steps), dtype=bool)
    valid = np.zeros((n, max_steps), dtype=bool)
    t_cur = t0.copy()
    occ3 = grid.occupancy
    for s in range(max_steps):
        if not alive.any():
            break
        axis = np.argmin(t_max, axis=1)
        t_next = np.minimum(t_max[np.arange(n), axis], t1)
        cc = np.clip(cell, 0, res - 1)
        rec = alive & (t_next > t_cur)
        ent[:, s] = np.where(rec, t_cur, 0.0)
        exi[:, s] = np.where(rec, t_next, 0.0)
        occ[:, s] = rec & occ3[cc[:, 0], cc[:, 1], cc[:, 2]]
        valid[:, s] = rec
        t_cur = np.where(alive, t_next, t_cur)
        adv = alive
        cell[adv, axis[adv]] += step[adv, axis[adv]]
        t_max[adv, axis[adv]] += t_delta[adv, axis[adv]]
        oob = (cell[np.arange(n), axis] < 0) | (cell[np.arange(n), axis] >= res[axis])
        alive = alive & (t_cur < t1 - 1e-15) & ~oob
    return ent, exi, occ, valid


@dataclass
class SampleSet:
    """Merged coarse+fine ray samples with interval lengths.

    segment_ids holds the occupied-interval index of each sample.
    """

    t_values: np.ndarray
    deltas: np.ndarray
    segment_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.t_values)


def empty_samples() -> SampleSet:
    return SampleSet(np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64))


class _ArcMap:
    """Arc-length parameterization of an occupied-interval union."""

    def __init__(self, intervals):
        self.enter = np.array([a for a, _ in intervals], dtype=np.float64)
        self.exit = np.array([b for _, b in intervals], dtype=np.float64)
        self.lengths = self.exit - self.enter
        self.cum = np.concatenate([[0.0], np.cumsum(self.lengths)])
        self.total = float(self.cum[-1])

    def inverse(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Arc length -> (ray parameter, interval index)."""
        s = np.asarray(s, dtype=np.float64)
        s_cl = np.clip(s, 0.0, np.nextafter(self.total, 0.0))
        idx = np.searchsorted(self.cum, s_cl, side="right") - 1
        idx = np.clip(idx, 0, len(self.lengths) - 1)
        t = self.enter[idx] + (s_cl - self.cum[idx])
        # s exactly at the total maps to the union's end
        at_end = s >= self.total
        t = np.where(at_end, self.exit[-1], t)
        idx = np.where(at_end, len(self.lengths) - 1, idx)
        return t, idx


def stratified_coarse(intervals, n1: int, rng: Pcg32):
    """One uniform sample per equal-measure stratum of the interval union.

    Returns (t (n1,), z (n1+1,)): samples and stratum edges, both mapped back
    into ray-parameter space.
    """
    if n1 < 1:
        raise ValueError("n1 must be >= 1")
    if not intervals:
        raise ValueError("intervals must be non-empty")
    amap = _ArcMap(intervals)
    us = np.array([rng.uniform() for _ in range(n1)])
    s_t = (np.arange(n1) + us) * amap.total / n1
    t, _ = amap.inverse(s_t)
    s_z = np.arange(n1 + 1) * amap.total / n1
    z, _ = amap.inverse(s_z)
    return t, z


def density_pdf(w) -> tuple[np.ndarray, np.ndarray]:
    """Floor-regularized normalized PDF and inclusive CDF over coarse densities."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("need at least one density")
    if np.any(w < 0):
        raise ValueError("densities must be >= 0")
    shifted = w + PDF_FLOOR
    pdf = shifted / shifted.sum()
    cdf = np.cumsum(pdf)
    cdf[-1] = 1.0
    return pdf, cdf


def systematic_fine(z, pdf, n2: int, v: float) -> np.ndarray:
    """Systematic resampling of n2 fine points across PDF-weighted segments.

    Segment allocation inverts the CDF at positions (k+v)/n2; placement within
    segment i uses t' = z_i + frac(v + k/n2) * (z_{i+1} - z_i) with the global
    sample index k.
    """
    z = np.asarray(z, dtype=np.float64)
    pdf = np.asarray(pdf, dtype=np.float64)
    if len(z) != len(pdf) + 1:
        raise ValueError("need len(z) == len(pdf) + 1")
    if n2 < 0:
        raise ValueError("n2 must be >= 0")
    if not (0.0 <= v < 1.0):
        raise ValueError("v must be in [0, 1)")
    if n2 == 0:
        return np.zeros(0)
    k = np.arange(n2)
    positions = (k + v) / n2
    cdf = np.cumsum(pdf)
    cdf[-1] = 1.0
    seg = np.searchsorted(cdf, positions + CDF_TIE_EPS, side="right")
    seg = np.clip(seg, 0, len(pdf) - 1)
    frac = (v + k / n2) % 1.0
    t = z[seg] + frac * (z[seg + 1] - z[seg])
    return np.sort(t)


def hybrid_sample(
    grid: OccupancyGrid,
    density_at,
    ray: Ray,
    n1: int,
    n2: int,
    rng: Pcg32,
    segments_from_intervals: bool = False,
) -> SampleSet:
    """Full per-ray pipeline: traversal, coarse strata, density PDF, fine
    systematic resampling, merge, and interval lengths.

    density_at maps an array of ray parameters to densities at those samples.
    With segments_from_intervals, the fine PDF is built over the occupied
    intervals themselves (mean coarse density per interval) instead of the
    coarse strata.
    """
    if n1 < 1:
        raise ValueError("n1 must be >= 1")
    intervals = traverse_occupied(grid, ray)
    if not intervals:
        return empty_samples()
    amap = _ArcMap(intervals)
    us = np.array([rng.uniform() for _ in range(n1)])
    s_coarse = (np.arange(n1) + us) * amap.total / n1
    t_coarse, _ = amap.inverse(s_coarse)
    w = np.asarray(density_at(t_coarse), dtype=np.float64)
    v = rng.uniform()
    if segments_from_intervals:
        # aggregate coarse densities onto their intervals
        _, ivl = amap.inverse(s_coarse)
        m = len(amap.lengths)
        sums = np.bincount(ivl, weights=w, minlength=m)
        counts = np.maximum(np.bincount(ivl, minlength=m), 1)
        pdf, _ = density_pdf(sums / counts)
        s_edges = amap.cum
    else:
        pdf, _ = density_pdf(w)
        s_edges = np.arange(n1 + 1) * amap.total / n1
    s_fine = systematic_fine(s_edges, pdf, n2, v)
    t_fine, _ = amap.inverse(s_fine)
    s_all = np.sort(np.concatenate([s_coarse, s_fine]))
    s_all = np.unique(s_all)
    t_all, seg_ids = amap.inverse(s_all)
    if len(t_all) == 0:
        return empty_samples()
    # midpoint-rule weights along the occupied union (gaps excluded): each
    # sample owns the arc between the midpoints to its neighbours, extended
    # to the union ends, so the weights sum to the total occupied length
    mid = 0.5 * (s_all[1:] + s_all[:-1])
    edges = np.concatenate([[0.0], mid, [amap.total]])
    deltas = np.diff(edges)
    return SampleSet(t_all, deltas, seg_ids)


def uniform_stratified(ray: Ray, n: int, rng: Pcg32) -> SampleSet:
    """Ablation fallback: stratified samples over the ray-box intersection."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if ray.t_max <= ray.t_min:
        return empty_samples()
    us = np.array([rng.uniform() for _ in range(n)])
    length = ray.t_max - ray.t_min
    t = ray.t_min + (np.arange(n) + us) * length / n
    mid = 0.5 * (t[1:] + t[:-1])
    edges = np.concatenate([[ray.t_min], mid, [ray.t_max]])
    deltas = np.diff(edges)
    return SampleSet(t, deltas, np.zeros(n, dtype=np.int64))


def hybrid_sample_batch(
    grid: OccupancyGrid,
    density_fn,
    origins,
    dirs,
    t_min,
    t_max,
    n1: int,
    n2: int,
    seed: int,
    stream_ids,
):
    """Vectorized hybrid sampling for a ray batch.

    density_fn maps (n_rays, n1, 3) world points to (n_rays, n1) densities.
    Ray r draws from the PCG32 substream stream_ids[r] of seed (n1 stratum
    uniforms, then the shared offset v), matching the scalar path.

    Returns (t (R, n1+n2), deltas (R, n1+n2), ray_ok (R,), seg_ids (R, n1+n2))
    with rows of empty-traversal rays zeroed; seg_ids holds each sample's
    occupied-interval index.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = origins.shape[0]
    ent, exi, occ, valid = traverse_occupied_batch(grid, origins, dirs, t_min, t_max)
    lengths = np.where(occ, exi - ent, 0.0)
    cum = np.concatenate([np.zeros((n, 1)), np.cumsum(lengths, axis=1)], axis=1)
    total = cum[:, -1]
    ray_ok = total > 0.0
    safe_total = np.where(ray_ok, total, 1.0)

    draws = batch_uniforms(seed, np.asarray(stream_ids, dtype=np.uint64), n1 + 1)
    us, v = draws[:, :n1], draws[:, n1]

    def invert(s):
        # piece index per arc-length target via right-searchsorted on cum rows
        s_cl = np.minimum(np.maximum(s, 0.0), safe_total[:, None] * (1.0 - 1e-15))
        idx = (cum[:, None, :] <= s_cl[:, :, None]).sum(axis=2) - 1
        idx = np.clip(idx, 0, lengths.shape[1] - 1)
        rows = np.arange(n)[:, None]
        t = ent[rows, idx] + (s_cl - cum[rows, idx])
        return t, idx

    s_coarse = (np.arange(n1)[None, :] + us) * safe_total[:, None] / n1
    t_coarse, _ = invert(s_coarse)
    pts = origins[:, None, :] + t_coarse[:, :, None] * dirs[:, None, :]
    w = np.asarray(density_fn(pts), dtype=np.float64)
    w = np.maximum(w, 0.0)

    shifted = w + PDF_FLOOR
    pdf = shifted / shifted.sum(axis=1, keepdims=True)
    cdf = np.cumsum(pdf, axis=1)
    cdf[:, -1] = 1.0

    k = np.arange(n2)[None, :]
    positions = (k + v[:, None]) / max(n2, 1)
    seg = (cdf[:, None, :] <= positions[:, :, None] + CDF_TIE_EPS).sum(axis=2)
    seg = np.clip(seg, 0, n1 - 1)
    frac = (v[:, None] + k / max(n2, 1)) % 1.0
    stratum = safe_total[:, None] / n1
    s_fine = seg * stratum + frac * stratum

    s_all = np.sort(np.concatenate([s_coarse, s_fine], axis=1), axis=1)
    t_all, seg_ids = invert(s_all)
    # midpoint-rule weights along the occupied union (gaps excluded): each
    # sample owns the arc between the midpoints to its neighbours, with the
    # first/last extended to the union ends so the weights sum to the total
    mid = 0.5 * (s_all[:, 1:] + s_all[:, :-1])
    lo = np.concatenate([np.zeros((n, 1)), mid], axis=1)
    hi = np.concatenate([mid, safe_total[:, None]], axis=1)
    deltas = np.maximum(hi - lo, 0.0)
    t_all[~ray_ok] = 0.0
    deltas[~ray_ok] = 0.0
    seg_ids[~ray_ok] = 0
    return t_all, deltas, ray_ok, seg_ids


def uniform_stratified_batch(origins, dirs, t_min, t_max, n: int, seed: int, stream_ids):
    """Vectorized uniform-stratified fallback with the same sample budget."""
    origins = np.asarray(origins, dtype=np.float64)
    r = origins.shape[0]
    t_min = np.asarray(t_min, dtype=np.float64)
    t_max = np.asarray(t_max, dtype=np.float64)
    lengths = np.maximum(t_max - t_min, 0.0)
    ray_ok = lengths > 0.0
    us = batch_uniforms(seed, np.asarray(stream_ids, dtype=np.uint64), n)
    t = t_min[:, None] + (np.arange(n)[None, :] + us) * lengths[:, None] / n
    mid = 0.5 * (t[:, 1:] + t[:, :-1])
    lo = np.concatenate([t_min[:, None], mid], axis=1)
    hi = np.concatenate([mid, t_max[:, None]], axis=1)
    deltas = np.maximum(hi - lo, 0.0)
    t[~ray_ok] = 0.0
    deltas[~ray_ok] = 0.0
    return t, deltas, ray_ok
