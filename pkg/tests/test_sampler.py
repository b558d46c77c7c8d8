"""Occupancy traversal, stratified coarse sampling, and systematic fine
resampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raymarch_ct.geometry import Aabb, Ray
from raymarch_ct.prng import Pcg32
from raymarch_ct.sampler import (
    OccupancyGrid,
    build_occupancy,
    density_pdf,
    hybrid_sample,
    hybrid_sample_batch,
    stratified_coarse,
    systematic_fine,
    traverse_occupied,
    traverse_occupied_batch,
    uniform_stratified,
    uniform_stratified_batch,
)

UNIT_BOUNDS = Aabb(np.zeros(3), np.ones(3))


class _FixedU:
    """Stub generator returning a constant uniform."""

    def __init__(self, u):
        self.u = u

    def uniform(self):
        return self.u


def _grid(occ):
    occ = np.asarray(occ, dtype=bool)
    return OccupancyGrid(occ.shape, UNIT_BOUNDS, occ, occ.astype(float), tau=0.0)


# ------------------------------------------------------------- traversal

def test_traverse_full_grid_single_interval():
    grid = OccupancyGrid.initial(4, UNIT_BOUNDS)
    ray = Ray(np.array([-1.0, 0.5, 0.5]), np.array([1.0, 0.0, 0.0]))
    ivs = traverse_occupied(grid, ray)
    assert len(ivs) == 1
    assert ivs[0] == pytest.approx((1.0, 2.0), abs=1e-12)


def test_traverse_checker_slabs():
    occ = np.zeros((4, 1, 1), dtype=bool)
    occ[1] = occ[3] = True  # occupied x-slabs [0.25,0.5] and [0.75,1.0]
    grid = _grid(occ)
    ray = Ray(np.array([-1.0, 0.5, 0.5]), np.array([1.0, 0.0, 0.0]))
    ivs = traverse_occupied(grid, ray)
    assert len(ivs) == 2
    assert ivs[0] == pytest.approx((1.25, 1.5), abs=1e-12)
    assert ivs[1] == pytest.approx((1.75, 2.0), abs=1e-12)


def test_traverse_merges_adjacent_cells():
    occ = np.zeros((4, 1, 1), dtype=bool)
    occ[1] = occ[2] = True
    grid = _grid(occ)
    ray = Ray(np.array([-1.0, 0.5, 0.5]), np.array([1.0, 0.0, 0.0]))
    ivs = traverse_occupied(grid, ray)
    assert len(ivs) == 1
    assert ivs[0] == pytest.approx((1.25, 1.75), abs=1e-12)


def test_traverse_empty_grid():
    occ = np.zeros((3, 3, 3), dtype=bool)
    ray = Ray(np.array([-1.0, 0.5, 0.5]), np.array([1.0, 0.0, 0.0]))
    assert traverse_occupied(_grid(occ), ray) == []


def test_traverse_miss():
    grid = OccupancyGrid.initial(4, UNIT_BOUNDS)
    ray = Ray(np.array([-1.0, 5.0, 0.5]), np.array([1.0, 0.0, 0.0]))
    assert traverse_occupied(grid, ray) == []


@given(
    seed=st.integers(0, 2**31),
    res=st.integers(2, 5),
)
@settings(max_examples=40, deadline=None)
def test_traverse_against_dense_march(seed, res):
    """Interval membership must agree with a brute-force fine march."""
    rng = np.random.default_rng(seed)
    occ = rng.random((res, res, res)) < 0.5
    grid = _grid(occ)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    o = rng.uniform(-2, 2, size=3)
    ray = Ray(o, d)
    ivs = traverse_occupied(grid, ray)
    # intervals sorted, disjoint, positive length
    for (a0, b0), (a1, b1) in zip(ivs, ivs[1:]):
        assert b0 <= a1 + 1e-12
    for a, b in ivs:
        assert b > a
    # dense march oracle, probing away from cell boundaries
    ts = np.linspace(0.0, 6.0, 1500)
    pts = o[None, :] + ts[:, None] * d[None, :]
    inside = np.all((pts >= 0) & (pts <= 1), axis=1)
    cell = np.clip((pts * res).astype(int), 0, res - 1)
    occ_at = occ[cell[:, 0], cell[:, 1], cell[:, 2]] & inside
    in_iv = np.zeros_like(occ_at)
    for a, b in ivs:
        in_iv |= (ts >= a) & (ts <= b)
    # allow disagreement only within a hair of cell boundaries
    g = pts * res
    near_edge = np.any(np.abs(g - np.round(g)) < 1e-3, axis=1)
    assert np.all(occ_at[~near_edge] == in_iv[~near_edge])


def test_traverse_batch_matches_scalar_pieces():
    rng = np.random.default_rng(3)
    occ = rng.random((4, 4, 4)) < 0.6
    grid = _grid(occ)
    n = 32
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = rng.uniform(-1.5, 1.5, size=(n, 3))
    ent, exi, occp, valid = traverse_occupied_batch(
        grid, origins, dirs, np.zeros(n), np.full(n, np.inf)
    )
    for i in range(n):
        ivs = traverse_occupied(grid, Ray(origins[i], dirs[i]))
        total_scalar = sum(b - a for a, b in ivs)
        total_batch = np.sum((exi[i] - ent[i])[occp[i]])
        assert total_batch == pytest.approx(total_scalar, abs=1e-9)


# -------------------------------------------------------- coarse sampling

def test_stratified_coarse_single_interval_midpoints():
    t, z = stratified_coarse([(0.0, 1.0)], 2, _FixedU(0.5))
    np.testing.assert_allclose(t, [0.25, 0.75], atol=1e-15)
    np.testing.assert_allclose(z, [0.0, 0.5, 1.0], atol=1e-15)


def test_stratified_coarse_two_intervals():
    t, z = stratified_coarse([(0.0, 1.0), (2.0, 3.0)], 2, _FixedU(0.5))
    np.testing.assert_allclose(t, [0.5, 2.5], atol=1e-15)
    # middle edge sits on the 1 -> 2 gap boundary
    assert z[0] == 0.0 and z[2] == 3.0
    assert z[1] in (1.0, 2.0) or 1.0 <= z[1] <= 2.0


def test_stratified_coarse_n1_one():
    t, z = stratified_coarse([(0.2, 0.9)], 1, Pcg32(5))
    assert len(t) == 1 and 0.2 <= t[0] < 0.9
    np.testing.assert_allclose(z, [0.2, 0.9])


def test_stratified_coarse_validation():
    with pytest.raises(ValueError):
        stratified_coarse([(0.0, 1.0)], 0, Pcg32(0))
    with pytest.raises(ValueError):
        stratified_coarse([], 2, Pcg32(0))


@given(
    u=st.floats(0.0, 0.999),
    n1=st.integers(1, 16),
)
@settings(max_examples=50, deadline=None)
def test_stratified_coarse_containment(u, n1):
    intervals = [(0.0, 0.5), (1.5, 1.75), (4.0, 5.0)]
    t, z = stratified_coarse(intervals, n1, _FixedU(u))
    assert len(t) == n1 and len(z) == n1 + 1
    for ti in t:
        assert any(a - 1e-12 <= ti <= b + 1e-12 for a, b in intervals)
    assert np.all(np.diff(t) >= -1e-12)


# ----------------------------------------------------------- pdf and fine

def test_density_pdf_examples():
    pdf, cdf = density_pdf([1.0, 3.0])
    np.testing.assert_allclose(pdf, [0.25, 0.75], atol=1e-7)
    np.testing.assert_allclose(cdf, [0.25, 1.0], atol=1e-7)
    pdf, cdf = density_pdf([0.0, 0.0])
    np.testing.assert_allclose(pdf, [0.5, 0.5])
    assert cdf[-1] == 1.0


def test_density_pdf_validation():
    with pytest.raises(ValueError):
        density_pdf([])
    with pytest.raises(ValueError):
        density_pdf([1.0, -0.1])


def test_systematic_fine_v_zero():
    t = systematic_fine([0.0, 1.0], [1.0], 4, 0.0)
    np.testing.assert_allclose(t, [0.0, 0.25, 0.5, 0.75], atol=1e-15)


def test_systematic_fine_wraparound():
    t = systematic_fine([0.0, 1.0], [1.0], 4, 0.9)
    # k=1: frac(0.9 + 0.25) = 0.15
    assert np.any(np.isclose(t, 0.15, atol=1e-12))


def test_systematic_fine_allocation():
    t = systematic_fine([0.0, 1.0, 2.0], [0.25, 0.75], 4, 0.0)
    # positions {0, .25, .5, .75}; cdf (0.25, 1.0): one sample in segment 0
    np.testing.assert_allclose(t, [0.0, 1.25, 1.5, 1.75], atol=1e-12)


def test_systematic_fine_validation():
    with pytest.raises(ValueError):
        systematic_fine([0.0, 1.0], [0.5, 0.5], 4, 0.0)
    with pytest.raises(ValueError):
        systematic_fine([0.0, 1.0], [1.0], -1, 0.0)
    with pytest.raises(ValueError):
        systematic_fine([0.0, 1.0], [1.0], 4, 1.0)
    assert len(systematic_fine([0.0, 1.0], [1.0], 0, 0.5)) == 0


@given(
    v=st.floats(0.0, 0.999),
    m=st.integers(1, 12),
)
@settings(max_examples=60, deadline=None)
def test_systematic_low_variance(v, m):
    """Uniform pdf over m segments with n2 = m: exactly one sample each."""
    z = np.linspace(0.0, 1.0, m + 1)
    pdf = np.full(m, 1.0 / m)
    t = systematic_fine(z, pdf, m, v)
    counts = np.histogram(t, bins=z)[0]
    assert np.all(counts == 1)


@given(
    z0=st.floats(-5, 5),
    dz=st.floats(0.01, 10),
    v=st.floats(0.0, 0.999),
    k=st.integers(0, 31),
    n2=st.integers(1, 32),
)
@settings(max_examples=100, deadline=None)
def test_eq_fine_placement_formula(z0, dz, v, k, n2):
    if k >= n2:
        return
    z = np.array([z0, z0 + dz])
    t = systematic_fine(z, np.array([1.0]), n2, v)
    frac = (v + k / n2) % 1.0
    expected = z0 + frac * dz
    assert np.any(np.abs(t - expected) <= 1e-12 * max(1.0, abs(expected)))


# ------------------------------------------------------------ full hybrid

def test_hybrid_sample_containment_and_deltas():
    occ = np.zeros((4, 1, 1), dtype=bool)
    occ[1] = occ[3] = True
    grid = _grid(occ)
    ray = Ray(np.array([-1.0, 0.5, 0.5]), np.array([1.0, 0.0, 0.0]))
    ss = hybrid_sample(grid, lambda ts: np.ones(len(ts)), ray, 8, 8, Pcg32(2))
    ivs = [(1.25, 1.5), (1.75, 2.0)]
    for t in ss.t_values:
        assert any(a - 1e-9 <= t <= b + 1e-9 for a, b in ivs)
    assert np.all(ss.deltas > 0)
    assert ss.deltas.sum() <= 0.5 + 1e-9  # union length
    assert np.all(np.diff(ss.t_values) > 0)


def test_hybrid_sample_empty_traversal():
    occ = np.zeros((2, 2, 2), dtype=bool)
    ray = Ray(np.array([-1.0, 0.5, 0.5]), np.array([1.0, 0.0, 0.0]))
    ss = hybrid_sample(_grid(occ), lambda ts: np.ones(len(ts)), ray, 4, 4, Pcg32(0))
    assert len(ss) == 0


def test_hybrid_sample_concentrates_on_density():
    grid = OccupancyGrid.initial(2, UNIT_BOUNDS)
    ray = Ray(np.array([-1.0, 0.5, 0.5]), np.array([1.0, 0.0, 0.0]))

    def density(ts):  # dense in the first half of the chord [1, 2]
        return np.where(np.asarray(ts) < 1.5, 100.0, 1.0)

    counts = [0, 0]
    for s in range(50):
        ss = hybrid_sample(grid, density, ray, 2, 16, Pcg32(s))
        fine = ss.t_values
        counts[0] += int(np.sum(fine < 1.5))
        counts[1] += int(np.sum(fine >= 1.5))
    assert counts[0] / (counts[0] + counts[1]) > 0.9


def test_hybrid_sample_interval_segment_variant():
    occ = np.zeros((4, 1, 1), dtype=bool)
    occ[0] = occ[2] = True
    grid = _grid(occ)
    ray = Ray(np.array([-1.0, 0.5, 0.5]), np.array([1.0, 0.0, 0.0]))
    ss = hybrid_sample(
        grid, lambda ts: np.ones(len(ts)), ray, 6, 6, Pcg32(4), segments_from_intervals=True
    )
    ivs = [(1.0, 1.25), (1.5, 1.75)]
    for t in ss.t_values:
        assert any(a - 1e-9 <= t <= b + 1e-9 for a, b in ivs)


def test_hybrid_batch_containment_and_determinism():
    rng = np.random.default_rng(1)
    occ = rng.random((4, 4, 4)) < 0.5
    grid = _grid(occ)
    n = 16
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = rng.uniform(-1.0, 2.0, size=(n, 3))
    dens = lambda pts: np.ones(pts.shape[:2])
    args = (grid, dens, origins, dirs, np.zeros(n), np.full(n, 10.0), 8, 8)
    t1, d1, ok1, seg1 = hybrid_sample_batch(*args, seed=99, stream_ids=np.arange(n))
    t2, d2, ok2, seg2 = hybrid_sample_batch(*args, seed=99, stream_ids=np.arange(n))
    np.testing.assert_array_equal(t1, t2)
    np.testing.assert_array_equal(d1, d2)
    np.testing.assert_array_equal(seg1, seg2)
    assert np.all(d1 >= 0)
    for i in range(n):
        if not ok1[i]:
            assert np.all(t1[i] == 0)
            continue
        ivs = traverse_occupied(grid, Ray(origins[i], dirs[i]))
        for j, t in enumerate(t1[i]):
            assert any(a - 1e-9 <= t <= b + 1e-9 for a, b in ivs)
            a, b = ivs[seg1[i, j]]
            assert a - 1e-9 <= t <= b + 1e-9


def test_uniform_stratified_budget_and_coverage():
    ray = Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]), 1.0, 3.0)
    ss = uniform_stratified(ray, 8, Pcg32(0))
    assert len(ss) == 8
    assert np.all((ss.t_values >= 1.0) & (ss.t_values < 3.0))
    assert ss.deltas.sum() == pytest.approx(2.0)  # weights cover the full span
    edges = 1.0 + np.arange(9) * 0.25
    counts = np.histogram(ss.t_values, bins=edges)[0]
    assert np.all(counts == 1)


def test_uniform_stratified_batch_matches_scalar():
    origins = np.zeros((3, 3))
    dirs = np.tile(np.array([1.0, 0.0, 0.0]), (3, 1))
    t, d, ok = uniform_stratified_batch(
        origins, dirs, np.array([0.0, 1.0, 0.0]), np.array([2.0, 4.0, 0.0]), 6,
        seed=7, stream_ids=np.array([0, 1, 2]),
    )
    assert ok.tolist() == [True, True, False]
    for i, (t0, t1) in enumerate([(0.0, 2.0), (1.0, 4.0)]):
        ss = uniform_stratified(Ray(origins[i], dirs[i], t0, t1), 6, Pcg32(7, stream=i))
        np.testing.assert_allclose(t[i], ss.t_values, atol=1e-12)
        np.testing.assert_allclose(d[i], ss.deltas, atol=1e-12)


# -------------------------------------------------------------- occupancy

def test_initial_grid_fully_occupied():
    grid = OccupancyGrid.initial(8, UNIT_BOUNDS)
    assert grid.occupancy.all()
    assert grid.ema_density.min() == 1.0


def test_build_occupancy_ema_and_threshold():
    grid = OccupancyGrid.initial(4, UNIT_BOUNDS)
    probe = lambda pts: np.zeros(len(pts))
    g1 = build_occupancy(probe, 4, UNIT_BOUNDS, tau=0.05, ema=0.5, prev=grid)
    np.testing.assert_allclose(g1.ema_density, 0.5)
    assert g1.occupancy.all()  # 0.5 > tau
    g2 = build_occupancy(probe, 4, UNIT_BOUNDS, tau=0.05, ema=0.5, prev=g1)
    g3 = build_occupancy(probe, 4, UNIT_BOUNDS, tau=0.05, ema=0.5, prev=g2)
    g4 = build_occupancy(probe, 4, UNIT_BOUNDS, tau=0.05, ema=0.5, prev=g3)
    np.testing.assert_allclose(g4.ema_density, 0.0625)
    assert g4.occupancy.all()
    g5 = build_occupancy(probe, 4, UNIT_BOUNDS, tau=0.05, ema=0.5, prev=g4)
    assert not g5.occupancy.any()  # 0.03125 < tau


def test_build_occupancy_keeps_dense_cells():
    def probe(pts):
        return np.where(pts[:, 0] < 0.5, 1.0, 0.0)

    g = build_occupancy(probe, 4, UNIT_BOUNDS, tau=0.01, ema=1.0, rng=Pcg32(0))
    assert g.occupancy[:2].all()


def test_build_occupancy_validation():
    probe = lambda pts: np.zeros(len(pts))
    with pytest.raises(ValueError):
        build_occupancy(probe, 4, UNIT_BOUNDS, tau=0.1, ema=0.0)
    with pytest.raises(ValueError):
        build_occupancy(probe, 4, UNIT_BOUNDS, tau=-1.0, ema=0.5)
