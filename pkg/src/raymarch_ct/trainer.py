"""Optimization of the density field against measured line integrals.

Ray batching, hybrid (or uniform fallback) sampling, line-integral rendering
p_hat = sum(D_j * delta_j), squared-error loss, Adam updates with exponential
learning-rate decay, and periodic occupancy refreshes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np
import torch

from .field import FieldConfig, RdaField, init_field, query_densities
from .geometry import rays_for_view
from .phantom import Volume
from .prng import Pcg32, batch_uniforms, mix_seed
from .projector import ProjectionSet
from .sampler import (
    OccupancyGrid,
    build_occupancy,
    hybrid_sample_batch,
    uniform_stratified_batch,
)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
EXTRACT_CHUNK = 65536


@dataclass
class TrainConfig:
    iterations: int = 1500
    batch_rays: int = 1024
    n1: int = 32
    n2: int = 32
    learning_rate: float = 1e-2
    lr_decay: float = 0.9  # multiplicative per 1000 steps
    occupancy_refresh_every: int = 256
    seed: int = 0
    use_xray_sampling: bool = True
    use_rda: bool = True
    log_every: int = 50
    tv_weight: float = 0.0
    occupancy_res: int = 64
    occupancy_tau_rel: float = 0.01
    occupancy_ema: float = 0.05
    segments_from_intervals: bool = False
    # mask attention to samples sharing an occupied interval ("line segment");
    # full-ray attention is the variant
    attend_per_interval: bool = True
    # Polyak average of the parameters with this decay is what training
    # returns (0 disables); smooths the bounce of late high-lr Adam steps
    param_ema: float = 0.0
    # global gradient-norm clip (0 disables); guards against rare late-stage
    # loss explosions at the still-high end-of-run learning rate
    grad_clip: float = 1.0
    # weight of an auxiliary data term rendered without attention on a
    # quarter of the batch; anchors the pointwise density (which extraction
    # reads) to the measurements so attention cannot absorb density mass
    pointwise_anchor: float = 1.0
    field: FieldConfig = dc_field(default_factory=FieldConfig)

    def __post_init__(self):
        if min(self.iterations, self.batch_rays, self.n1, self.log_every,
               self.occupancy_refresh_every) < 1:
            raise ValueError("iteration/batch/sample counts must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class TrainReport:
    loss_history: list[float]
    final_psnr: float | None
    final_ssim: float | None
    wall_clock_s: float
    sample_stats: dict

    def to_dict(self) -> dict:
        return asdict(self)


def render_ray(densities, deltas) -> float:
    """Discrete Beer-Lambert line integral sum(D_j * delta_j)."""
    densities = np.asarray(densities, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    if densities.shape != deltas.shape:
        raise ValueError("densities and deltas must have equal length")
    if densities.size == 0:
        return 0.0
    return float(np.sum(densities * deltas))


class RayBank:
    """Flattened rays and measurements for all (view, pixel) pairs."""

    def __init__(self, projections: ProjectionSet):
        geom = projections.geom
        origins, dirs, tmin, tmax, meas = [], [], [], [], []
        for view in range(geom.n_views):
            o, d, t0, t1 = rays_for_view(geom, view)
            origins.append(o)
            dirs.append(d)
            tmin.append(t0)
            tmax.append(t1)
            meas.append(projections.images[view].reshape(-1))
        self.origins = np.concatenate(origins)
        self.dirs = np.concatenate(dirs)
        self.t_min = np.concatenate(tmin)
        self.t_max = np.concatenate(tmax)
        self.measured = np.concatenate(meas)
        self.n_rays = len(self.measured)


def _maybe_compile(field: RdaField):
    """Fused kernels are a large win on CPU; fall back to eager if the
    compiler is unavailable."""
    try:
        return torch.compile(field)
    except Exception:
        return field


def _pointwise_density_fn(field: RdaField, attend: bool):
    """(N, 3) world points -> (N,) densities, chunked seq-1 queries."""

    def fn(points: np.ndarray) -> np.ndarray:
        out = np.empty(len(points))
        for lo in range(0, len(points), EXTRACT_CHUNK):
            chunk = points[lo : lo + EXTRACT_CHUNK]
            d = query_densities(field, chunk.reshape(-1, 1, 3), attend=attend)
            out[lo : lo + EXTRACT_CHUNK] = d.reshape(-1)
        return out

    return fn


def _sequence_density_fn(field: RdaField, attend: bool):
    """(R, n, 3) world points (one ray per row) -> (R, n) densities."""

    def fn(points: np.ndarray) -> np.ndarray:
        return query_densities(field, points, attend=attend)

    return fn


def _hybrid_sample_scalar_loop(grid, field, cfg, origins, dirs, t0, t1, seed, stream_ids):
    """Per-ray fallback for the interval-segment variant (slow path)."""
    from .geometry import Ray
    from .sampler import hybrid_sample

    n = cfg.n1 + cfg.n2
    t = np.zeros((len(origins), n))
    deltas = np.zeros_like(t)
    ray_ok = np.zeros(len(origins), dtype=bool)
    probe = _pointwise_density_fn(field, attend=False)
    for i in range(len(origins)):
        if t1[i] <= t0[i]:
            continue
        ray = Ray(origins[i], dirs[i], float(t0[i]), float(t1[i]))
        rng = Pcg32(seed, stream=int(stream_ids[i]))

        def density_at(ts):
            pts = origins[i][None, :] + np.asarray(ts)[:, None] * dirs[i][None, :]
            return probe(pts)

        ss = hybrid_sample(grid, density_at, ray, cfg.n1, cfg.n2, rng,
                           segments_from_intervals=True)
        m = min(len(ss), n)
        if m == 0:
            continue
        t[i, :m] = ss.t_values[:m]
        deltas[i, :m] = ss.deltas[:m]
        ray_ok[i] = True
    return t, deltas, ray_ok


def train_step(
    field: RdaField,
    projections: ProjectionSet,
    grid: OccupancyGrid,
    cfg: TrainConfig,
    rng: Pcg32,
    optimizer: torch.optim.Optimizer | None = None,
    step: int = 0,
    ray_bank: RayBank | None = None,
    model=None,
) -> float:
    """One optimization step over a random ray batch; returns the loss.

    model, when given, is a (possibly compiled) callable standing in for
    field's forward pass; parameters and gradients still live on field."""
    if model is None:
        model = field
    if ray_bank is None:
        ray_bank = RayBank(projections)
    if optimizer is None:
        optimizer = torch.optim.Adam(field.parameters(), lr=cfg.learning_rate,
                                     betas=ADAM_BETAS, eps=ADAM_EPS)
    if cfg.batch_rays < 1:
        raise ValueError("empty batch")

    batch_seed = rng.next_u64()
    sample_seed = rng.next_u64()
    u = batch_uniforms(batch_seed, np.zeros(1, dtype=np.uint64), cfg.batch_rays)[0]
    idx = np.minimum((u * ray_bank.n_rays).astype(np.int64), ray_bank.n_rays - 1)

    origins = ray_bank.origins[idx]
    dirs = ray_bank.dirs[idx]
    t0 = ray_bank.t_min[idx]
    t1 = ray_bank.t_max[idx]
    measured = ray_bank.measured[idx]

    seg = None
    if cfg.use_xray_sampling and cfg.segments_from_intervals:
        t, deltas, ray_ok = _hybrid_sample_scalar_loop(
            grid, field, cfg, origins, dirs, t0, t1, sample_seed, idx)
    elif cfg.use_xray_sampling:
        # the sampling PDF describes the scalar density field, so the probe
        # always reads the pointwise head; probing through attention feeds
        # context-shifted densities into the fine-sample placement
        t, deltas, ray_ok, seg = hybrid_sample_batch(
            grid,
            _sequence_density_fn(model, attend=False),
            origins, dirs, t0, t1, cfg.n1, cfg.n2,
            seed=sample_seed, stream_ids=idx,
        )
    else:
        t, deltas, ray_ok = uniform_stratified_batch(
            origins, dirs, t0, t1, cfg.n1 + cfg.n2,
            seed=sample_seed, stream_ids=idx,
        )

    pts = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    dtype = next(field.parameters()).dtype
    pts_t = torch.as_tensor(pts, dtype=dtype)
    deltas_t = torch.as_tensor(deltas, dtype=dtype)
    t_norm = None
    if cfg.field.use_t_channel:
        span = np.where(t1 > t0, t1 - t0, 1.0)
        t_norm = torch.as_tensor((t - t0[:, None]) / span[:, None], dtype=dtype)

    seg_t = None
    if cfg.use_rda and cfg.attend_per_interval and seg is not None:
        seg_t = torch.as_tensor(seg)

    dens = model(field.normalize(pts_t), t_norm=t_norm, attend=cfg.use_rda,
                 segment_ids=seg_t)
    pred = (dens * deltas_t).sum(dim=1)
    meas_t = torch.as_tensor(measured, dtype=dtype)
    loss = torch.mean((pred - meas_t) ** 2)
    if cfg.use_rda and cfg.pointwise_anchor > 0:
        k = max(1, cfg.batch_rays // 4)
        t_norm_k = t_norm[:k] if t_norm is not None else None
        dens_pw = model(field.normalize(pts_t[:k]), t_norm=t_norm_k, attend=False)
        pred_pw = (dens_pw * deltas_t[:k]).sum(dim=1)
        loss = loss + cfg.pointwise_anchor * torch.mean((pred_pw - meas_t[:k]) ** 2)
    if cfg.tv_weight > 0:
        loss = loss + cfg.tv_weight * torch.mean(torch.abs(dens[:, 1:] - dens[:, :-1]))

    lr = cfg.learning_rate * cfg.lr_decay ** (step // 1000)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(field.parameters(), cfg.grad_clip)
    optimizer.step()
    return float(loss.detach())


def train(
    projections: ProjectionSet,
    cfg: TrainConfig,
    gt_volume: Volume | None = None,
) -> tuple[RdaField, TrainReport]:
    """Run cfg.iterations of train_step with periodic occupancy refreshes."""
    t_start = time.time()
    geom = projections.geom
    bounds = geom.volume_bounds
    field = init_field(cfg.field, bounds, cfg.seed)
    ray_bank = RayBank(projections)
    grid = OccupancyGrid.initial(cfg.occupancy_res, bounds)
    optimizer = torch.optim.Adam(field.parameters(), lr=cfg.learning_rate,
                                 betas=ADAM_BETAS, eps=ADAM_EPS)
    rng = Pcg32(mix_seed(cfg.seed, 0xBA7C))
    occ_rng = Pcg32(mix_seed(cfg.seed, 0x0CC0))
    model = _maybe_compile(field)

    shadow = None
    if cfg.param_ema > 0:
        shadow = {n: p.detach().clone() for n, p in field.named_parameters()}

    running_max = 0.0
    losses: list[float] = []
    history: list[float] = []
    for step in range(cfg.iterations):
        if cfg.use_xray_sampling and step > 0 and step % cfg.occupancy_refresh_every == 0:
            probe = _pointwise_density_fn(field, attend=cfg.use_rda)
            seen = {"max": running_max}

            def tracking_probe(points):
                d = probe(points)
                seen["max"] = max(seen["max"], float(d.max()) if d.size else 0.0)
                return d

            tau = cfg.occupancy_tau_rel * max(running_max, 1e-12)
            grid = build_occupancy(
                tracking_probe, grid.res, bounds, tau=tau,
                ema=cfg.occupancy_ema, rng=occ_rng, prev=grid,
            )
            running_max = seen["max"]
        loss = train_step(field, projections, grid, cfg, rng,
                          optimizer=optimizer, step=step, ray_bank=ray_bank,
                          model=model)
        losses.append(loss)
        if shadow is not None:
            with torch.no_grad():
                for n, p in field.named_parameters():
                    shadow[n].mul_(cfg.param_ema).add_(p, alpha=1.0 - cfg.param_ema)
        if (step + 1) % cfg.log_every == 0:
            history.append(float(np.mean(losses[-cfg.log_every:])))

    if shadow is not None:
        with torch.no_grad():
            for n, p in field.named_parameters():
                p.copy_(shadow[n])

    final_psnr = final_ssim = None
    if gt_volume is not None:
        from .metrics import psnr as psnr_fn, ssim as ssim_fn

        recon = extract_volume(field, gt_volume.dims, gt_volume.spacing,
                               gt_volume.origin, attend=cfg.use_rda)
        data_range = float(gt_volume.data.max() - gt_volume.data.min())
        final_psnr = psnr_fn(gt_volume, recon, data_range=data_range)
        final_ssim = ssim_fn(gt_volume, recon, data_range=data_range)

    occupied_frac = float(grid.occupancy.mean())
    report = TrainReport(
        loss_history=history,
        final_psnr=final_psnr,
        final_ssim=final_ssim,
        wall_clock_s=time.time() - t_start,
        sample_stats={
            "samples_per_ray": cfg.n1 + cfg.n2,
            "occupied_cell_fraction": occupied_frac,
            "final_loss": losses[-1] if losses else None,
        },
    )
    return field, report


def extract_volume(
    field: RdaField,
    dims,
    spacing=None,
    origin=None,
    attend: bool = True,
) -> Volume:
    """Evaluate the field at every voxel centre (sequence length 1, fixed
    chunks) into a dense volume."""
    dims = np.atleast_1d(np.asarray(dims, dtype=int))
    if dims.size == 1:
        dims = np.repeat(dims, 3)
    if np.any(dims < 1):
        raise ValueError("dims must be >= 1")
    bounds = field.bounds
    if spacing is None:
        spacing = bounds.size / dims
    spacing = np.asarray(spacing, dtype=np.float64).reshape(3)
    if origin is None:
        origin = bounds.center - 0.5 * (dims - 1) * spacing
    origin = np.asarray(origin, dtype=np.float64).reshape(3)

    shell = Volume(np.zeros(tuple(dims)), spacing, origin)
    pts = shell.voxel_centers()
    vals = _pointwise_density_fn(field, attend=attend)(pts)
    data = vals.reshape(tuple(dims), order="F")
    return Volume(data, spacing, origin)
