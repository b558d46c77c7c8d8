"""Command-line front-end: phantom -> project -> train/sart -> eval -> slice.

Exit codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import io as ctio
from .field import FieldConfig
from .geometry import make_circular_geometry
from .metrics import evaluate
from .phantom import builtin_phantom
from .prng import Pcg32, mix_seed
from .projector import add_noise, forward_project
from .sart import SartConfig, sart_reconstruct
from .trainer import TrainConfig, extract_volume, train


class _Parser(argparse.ArgumentParser):
    # spec'd exit codes: argument problems are validation errors (1), not 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _apply_threads(threads: int | None) -> None:
    import torch

    if threads is None:
        env = os.environ.get("RAYMARCH_CT_THREADS")
        threads = int(env) if env else os.cpu_count() or 1
    if threads < 1:
        raise ctio.ConfigError("--threads must be >= 1")
    torch.set_num_threads(threads)


def _cmd_phantom(args) -> int:
    vol = builtin_phantom(args.name, args.dims)
    ctio.write_volume(args.out, vol)
    return 0


def _cmd_project(args) -> int:
    vol = ctio.read_volume(args.vol)
    bounds = vol.bounds
    r = 0.5 * bounds.diagonal
    sid = args.sid if args.sid is not None else 1.75 * r
    sdd = args.sdd if args.sdd is not None else 2.9 * r
    span = 4.2 * r
    pitch_u = args.pitch_u if args.pitch_u is not None else span / args.cols
    pitch_v = args.pitch_v if args.pitch_v is not None else span / args.rows
    geom = make_circular_geometry(
        args.views, sid, sdd, args.rows, args.cols, pitch_u, pitch_v, bounds
    )
    step = args.step if args.step is not None else 0.5 * float(vol.spacing.min())
    proj = forward_project(vol, geom, step)
    if args.noise_photons is not None:
        rng = Pcg32(mix_seed(args.seed, 0x401E))
        proj = add_noise(proj, args.noise_photons, rng)
    ctio.write_projections(args.out, proj)
    return 0


def _cmd_train(args) -> int:
    proj = ctio.read_projections(args.proj)
    if args.config is not None:
        cfg, _, _ = ctio.load_run_config(args.config)
    else:
        cfg = TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if args.no_xray_sampling:
        cfg.use_xray_sampling = False
    if args.no_rda:
        cfg.use_rda = False
    gt = ctio.read_volume(args.gt) if args.gt else None
    field, report = train(proj, cfg, gt_volume=gt)
    ctio.save_checkpoint(args.out, field, attend=cfg.use_rda, seed=cfg.seed)
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return 0


def _cmd_extract(args) -> int:
    field, attend = ctio.load_checkpoint(args.ckpt)
    vol = extract_volume(field, args.dims, attend=attend)
    ctio.write_volume(args.out, vol)
    return 0


def _cmd_sart(args) -> int:
    proj = ctio.read_projections(args.proj)
    cfg = SartConfig(iterations=args.iters, relaxation=args.relaxation)
    bounds = proj.geom.volume_bounds
    dims = np.array([args.dims] * 3)
    spacing = bounds.size / dims
    origin = bounds.min + 0.5 * spacing
    vol = sart_reconstruct(proj, dims, spacing, origin, cfg)
    ctio.write_volume(args.out, vol)
    return 0


def _cmd_eval(args) -> int:
    gt = ctio.read_volume(args.gt)
    pred = ctio.read_volume(args.pred)
    report = evaluate(gt, pred, threshold=args.threshold)
    out = json.dumps(report.to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(out)
    else:
        sys.stdout.write(out)
    return 0


def _cmd_slice(args) -> int:
    vol = ctio.read_volume(args.vol)
    ctio.write_pgm_slice(args.out, vol, args.axis, args.index)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="raymarch-ct", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        p = sub.add_parser(name, **kw)
        p.set_defaults(func=fn)
        p.add_argument("--threads", type=int, default=None,
                       help="torch worker threads (env RAYMARCH_CT_THREADS; default all cores)")
        return p

    p = add("phantom", _cmd_phantom, help="generate a built-in ground-truth volume")
    p.add_argument("--name", required=True, choices=["jaw", "shepp3d", "blocks"])
    p.add_argument("--dims", type=int, required=True)
    p.add_argument("--out", required=True)

    p = add("project", _cmd_project, help="simulate cone-beam line-integral projections")
    p.add_argument("--vol", required=True)
    p.add_argument("--views", type=int, required=True)
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--sid", type=float, default=None)
    p.add_argument("--sdd", type=float, default=None)
    p.add_argument("--pitch-u", type=float, default=None)
    p.add_argument("--pitch-v", type=float, default=None)
    p.add_argument("--noise-photons", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("train", _cmd_train, help="fit the ray-attention density field")
    p.add_argument("--proj", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--gt", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--no-xray-sampling", action="store_true")
    p.add_argument("--no-rda", action="store_true")

    p = add("extract", _cmd_extract, help="evaluate a checkpoint into a voxel volume")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dims", type=int, required=True)
    p.add_argument("--out", required=True)

    p = add("sart", _cmd_sart, help="SART algebraic reconstruction baseline")
    p.add_argument("--proj", required=True)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--lambda", dest="relaxation", type=float, default=1.0)
    p.add_argument("--dims", type=int, required=True)
    p.add_argument("--out", required=True)

    p = add("eval", _cmd_eval, help="PSNR/SSIM/IoU/Dice between two volumes")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out", default=None)

    p = add("slice", _cmd_slice, help="export one slice as 8-bit PGM")
    p.add_argument("--vol", required=True)
    p.add_argument("--axis", required=True, choices=["x", "y", "z"])
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_threads(args.threads)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except FileNotFoundError as exc:
        print(f"raymarch-ct: I/O error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"raymarch-ct: I/O error: {exc}", file=sys.stderr)
        return 2
    except (ctio.ConfigError, ValueError) as exc:
        print(f"raymarch-ct: invalid input: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
