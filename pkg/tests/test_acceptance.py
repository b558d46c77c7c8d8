"""Acceptance suite: one test per release criterion.

Each test prints a single "criterion N: PASS/FAIL" line (visible with -s).
Criteria 4-6 share one full-scale training run and take several minutes on a
single core.
"""

import math
import time

import numpy as np
import pytest
import scipy.stats
import torch

from raymarch_ct.cli import main as cli_main
from raymarch_ct.field import FieldConfig, init_field
from raymarch_ct.geometry import make_circular_geometry
from raymarch_ct.metrics import (
    PSNR_SENTINEL,
    iou_dice,
    psnr,
    ssim,
)
from raymarch_ct.phantom import Volume, builtin_phantom
from raymarch_ct.prng import Pcg32
from raymarch_ct.projector import ProjectionSet, backproject, forward_project
from raymarch_ct.sampler import density_pdf, systematic_fine
from raymarch_ct.sart import SartConfig, sart_reconstruct
from raymarch_ct.trainer import TrainConfig, train


def _crit(n: int, ok: bool, detail: str):
    print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {n}: {detail}"


# ------------------------------------------------------- shared full-scale run

def _make_geom(vol, views, det):
    b = vol.bounds
    r = 0.5 * b.diagonal
    return make_circular_geometry(views, 1.75 * r, 2.9 * r, det, det,
                                  4.2 * r / det, 4.2 * r / det, b)


@pytest.fixture(scope="session")
def scan_data():
    """blocks 32^3, 30 views, 48x48 detector."""
    torch.set_num_threads(1)
    vol = builtin_phantom("blocks", 32)
    proj = forward_project(vol, _make_geom(vol, 30, 48))
    return vol, proj


@pytest.fixture(scope="session")
def full_run(scan_data):
    """Default training (both flags on, seed 0) at full scale."""
    vol, proj = scan_data
    t0 = time.time()
    _, report = train(proj, TrainConfig(seed=0), gt_volume=vol)
    return report, time.time() - t0


# ------------------------------------------------------------------ criteria

def test_criterion_1_fine_resampling_exactness():
    def reference(z, pdf, n2, v):
        # hand-rolled scalar evaluator for the systematic placement rule
        cum, acc = [], 0.0
        for p in pdf:
            acc += p
            cum.append(acc)
        cum[-1] = 1.0
        out = []
        for k in range(n2):
            pos = (k + v) / n2
            i = 0
            while i < len(pdf) - 1 and cum[i] <= pos + 1e-12:
                i += 1
            frac = math.fmod(v + k / n2, 1.0)
            out.append(z[i] + frac * (z[i + 1] - z[i]))
        return sorted(out)

    rng = np.random.default_rng(11)
    t0 = time.time()
    worst = 0.0
    for _ in range(50):
        m = int(rng.integers(1, 9))
        z = np.sort(rng.uniform(-5, 5, size=m + 1))
        pdf, _ = density_pdf(rng.uniform(0, 3, size=m))
        n2 = int(rng.integers(1, 13))
        v = float(rng.uniform(0, 1))
        got = systematic_fine(z, pdf, n2, v)
        want = np.array(reference(list(z), list(pdf), n2, v))
        rel = np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-300))
        worst = max(worst, rel)
    wall = time.time() - t0
    _crit(1, worst <= 1e-12 and wall < 1.0,
          f"max rel err {worst:.2e}, {wall:.2f}s")


def test_criterion_2_gradient_check():
    torch.set_num_threads(1)
    t0 = time.time()
    cfg = FieldConfig(levels=2, table_size=64, feats_per_level=2, base_res=4,
                      growth=1.5, d_model=8, n_heads=2, n_blocks=2)
    vol = builtin_phantom("blocks", 8)
    field = init_field(cfg, vol.bounds, seed=5, zero_attn_out=False).double()

    gen = np.random.default_rng(5)
    pts = torch.tensor(gen.uniform(0.05, 0.95, size=(4, 4, 3)))  # 4 rays x 4 samples
    deltas = torch.tensor(gen.uniform(0.01, 0.2, size=(4, 4)))
    target = torch.tensor(gen.uniform(0, 1, size=(4,)))

    def loss_value():
        dens = field(pts, attend=True)
        return torch.sum(((dens * deltas).sum(dim=1) - target) ** 2)

    loss = loss_value()
    loss.backward()
    params = list(field.parameters())
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    idx = gen.choice(total, size=450, replace=False)

    h = 1e-4
    worst = 0.0
    with torch.no_grad():
        for flat_i in idx:
            pi, off = 0, int(flat_i)
            while off >= sizes[pi]:
                off -= sizes[pi]
                pi += 1
            p = params[pi].view(-1)
            analytic = float(params[pi].grad.view(-1)[off])
            orig = float(p[off])
            p[off] = orig + h
            up = float(loss_value())
            p[off] = orig - h
            dn = float(loss_value())
            p[off] = orig
            fd = (up - dn) / (2 * h)
            rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-6)
            worst = max(worst, rel)
    wall = time.time() - t0
    _crit(2, worst <= 1e-3 and wall < 30.0,
          f"450 params, max rel err {worst:.2e}, {wall:.1f}s")


def test_criterion_3_projector_adjointness():
    t0 = time.time()
    vol0 = builtin_phantom("blocks", 16)
    geom = _make_geom(vol0, 8, 16)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        x = rng.random((16, 16, 16))
        y = rng.random((8, 16, 16))
        vx = Volume(x, vol0.spacing, vol0.origin)
        ax = forward_project(vx, geom).images
        aty = backproject(ProjectionSet(geom, y), vol0.dims, vol0.spacing, vol0.origin)
        lhs = float(np.sum(ax * y))
        rhs = float(np.sum(x * aty.data))
        rel = abs(lhs - rhs) / (np.linalg.norm(ax) * np.linalg.norm(y))
        worst = max(worst, rel)
    wall = time.time() - t0
    _crit(3, worst <= 1e-3 and wall < 30.0,
          f"20 pairs, max rel err {worst:.2e}, {wall:.1f}s")


def test_criterion_4_end_to_end_reconstruction(full_run):
    report, wall = full_run
    ok = report.final_psnr >= 25.0 and report.final_ssim >= 0.85 and wall <= 900.0
    _crit(4, ok,
          f"psnr {report.final_psnr:.2f} dB, ssim {report.final_ssim:.3f}, {wall:.0f}s")


def test_criterion_5_ablation_ordering(scan_data, full_run):
    vol, proj = scan_data
    t0 = time.time()
    seeds = (0, 1, 2)
    medians = {}
    for use_xray in (True, False):
        for use_rda in (True, False):
            vals = []
            for seed in seeds:
                if use_xray and use_rda and seed == 0:
                    vals.append(full_run[0].final_psnr)
                    continue
                cfg = TrainConfig(seed=seed, use_xray_sampling=use_xray,
                                  use_rda=use_rda)
                _, rep = train(proj, cfg, gt_volume=vol)
                vals.append(rep.final_psnr)
                print(f"  arm xray={use_xray} rda={use_rda} seed={seed}: "
                      f"{rep.final_psnr:.2f} dB", flush=True)
            medians[(use_xray, use_rda)] = float(np.median(vals))
    wall = time.time() - t0
    full = medians[(True, True)]
    base = medians[(False, False)]
    only_xray = medians[(True, False)]
    only_rda = medians[(False, True)]
    ok = (full > base
          and full >= only_xray - 0.5
          and full >= only_rda - 0.5
          and wall <= 3 * 3600.0)
    _crit(5, ok,
          f"full {full:.2f} / xray-only {only_xray:.2f} / rda-only {only_rda:.2f}"
          f" / base {base:.2f} dB, {wall:.0f}s")


def test_criterion_6_beats_sart(scan_data, full_run):
    vol, proj = scan_data
    t0 = time.time()
    rec = sart_reconstruct(proj, vol.dims, vol.spacing, vol.origin,
                           SartConfig(iterations=20, relaxation=1.0))
    sart_psnr = psnr(vol, rec, data_range=1.0)
    wall = time.time() - t0
    field_psnr = full_run[0].final_psnr
    ok = field_psnr >= sart_psnr + 2.0 and wall <= 1200.0
    _crit(6, ok, f"field {field_psnr:.2f} vs sart {sart_psnr:.2f} dB, {wall:.0f}s")


def test_criterion_7_sampling_concentration():
    t0 = time.time()
    # 100:1 density ratio between two equal coarse segments
    z2 = np.array([0.0, 0.5, 1.0])
    pdf2, _ = density_pdf([100.0, 1.0])
    rng = Pcg32(7)
    dense = total = 0
    for _ in range(10_000):
        t = systematic_fine(z2, pdf2, 8, rng.uniform())
        dense += int(np.sum(t < 0.5))
        total += len(t)
    frac = dense / total

    # uniform field: 16-bin chi-squared uniformity over fine positions
    z16 = np.linspace(0.0, 1.0, 17)
    pdf16, _ = density_pdf(np.ones(16))
    rng = Pcg32(8)
    hist = np.zeros(16)
    for _ in range(10_000):
        t = systematic_fine(z16, pdf16, 32, rng.uniform())
        hist += np.histogram(t, bins=16, range=(0.0, 1.0))[0]
    _, p = scipy.stats.chisquare(hist)
    wall = time.time() - t0
    ok = frac >= 0.9 and p > 0.01 and wall < 60.0
    _crit(7, ok, f"dense fraction {frac:.3f}, chi2 p {p:.3f}, {wall:.1f}s")


def test_criterion_8_metric_identities():
    t0 = time.time()
    rng = np.random.default_rng(88)
    worst = 0.0
    for _ in range(1000):
        a = Volume((rng.random((6, 6, 6)) > 0.5).astype(float), [1, 1, 1], [0, 0, 0])
        b = Volume((rng.random((6, 6, 6)) > 0.5).astype(float), [1, 1, 1], [0, 0, 0])
        i, d = iou_dice(a, b, 0.5)
        worst = max(worst, abs(d - 2 * i / (1 + i)))

    v = Volume(rng.random((9, 9, 9)), [1, 1, 1], [0, 0, 0])
    ssim_id = ssim(v, v)
    psnr_id = psnr(v, v)
    data = rng.random((10, 10, 10))
    data[0, 0, 0], data[0, 0, 1] = 0.0, 1.0
    gt = Volume(data, [1, 1, 1], [0, 0, 0])
    off = Volume(data + 0.1, [1, 1, 1], [0, 0, 0])
    offset_db = psnr(gt, off)
    wall = time.time() - t0
    ok = (worst == 0.0 and ssim_id == 1.0 and psnr_id == PSNR_SENTINEL
          and abs(offset_db - 20.0) <= 1e-6 and wall < 60.0)
    _crit(8, ok,
          f"dice identity err {worst:.1e}, ssim(v,v) {ssim_id}, "
          f"psnr(v,v) {psnr_id}, offset {offset_db:.7f} dB, {wall:.1f}s")


def test_criterion_9_determinism(tmp_path):
    import json

    t0 = time.time()
    gt = tmp_path / "gt"
    assert cli_main(["phantom", "--name", "blocks", "--dims", "16",
                     "--out", str(gt), "--threads", "1"]) == 0
    blobs = []
    for run in ("a", "b"):
        out = tmp_path / f"proj_{run}"
        assert cli_main(["project", "--vol", str(gt), "--views", "4",
                         "--rows", "12", "--cols", "12", "--threads", "1",
                         "--out", str(out)]) == 0
        blobs.append(b"".join(f.read_bytes()
                              for f in sorted(out.glob("view_*.raw"))))
    project_ok = blobs[0] == blobs[1]

    cfg = {"train": {"iterations": 30, "batch_rays": 64, "n1": 8, "n2": 8,
                     "occupancy_res": 16, "seed": 4,
                     "field": {"levels": 2, "table_size": 512, "base_res": 4,
                               "d_model": 8, "n_heads": 2, "n_blocks": 1}}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    ckpts = []
    for run in ("a", "b"):
        out = tmp_path / f"ckpt_{run}"
        assert cli_main(["train", "--proj", str(tmp_path / "proj_a"),
                         "--config", str(tmp_path / "cfg.json"),
                         "--threads", "1", "--out", str(out)]) == 0
        ckpts.append(out.with_suffix(".raw").read_bytes())
    train_ok = ckpts[0] == ckpts[1]
    wall = time.time() - t0
    _crit(9, project_ok and train_ok,
          f"project identical: {project_ok}, train identical: {train_ok}, {wall:.0f}s")
