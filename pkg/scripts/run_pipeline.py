#!/usr/bin/env python3
"""End-to-end demo: phantom -> projections -> field training -> extraction
-> SART baseline -> metrics, all through the CLI entry point.

Writes everything under --workdir and prints the two evaluation reports.
"""

import argparse
import json
import sys
from pathlib import Path

from raymarch_ct.cli import main as cli


def run(argv):
    print("+ raymarch-ct " + " ".join(argv), flush=True)
    rc = cli(argv)
    if rc != 0:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", default="pipeline_out")
    ap.add_argument("--phantom", default="blocks", choices=["jaw", "shepp3d", "blocks"])
    ap.add_argument("--dims", type=int, default=32)
    ap.add_argument("--views", type=int, default=30)
    ap.add_argument("--det", type=int, default=48)
    ap.add_argument("--iterations", type=int, default=1500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    w = Path(args.workdir)
    w.mkdir(parents=True, exist_ok=True)
    t = ["--threads", str(args.threads)]

    run(["phantom", "--name", args.phantom, "--dims", str(args.dims),
         "--out", str(w / "gt")] + t)
    run(["project", "--vol", str(w / "gt"), "--views", str(args.views),
         "--rows", str(args.det), "--cols", str(args.det),
         "--out", str(w / "proj")] + t)
    run(["train", "--proj", str(w / "proj"), "--gt", str(w / "gt"),
         "--iterations", str(args.iterations), "--seed", str(args.seed),
         "--out", str(w / "ckpt"), "--report", str(w / "train_report.json")] + t)
    run(["extract", "--ckpt", str(w / "ckpt"), "--dims", str(args.dims),
         "--out", str(w / "recon_field")] + t)
    run(["sart", "--proj", str(w / "proj"), "--iters", "20",
         "--dims", str(args.dims), "--out", str(w / "recon_sart")] + t)
    run(["eval", "--gt", str(w / "gt"), "--pred", str(w / "recon_field"),
         "--out", str(w / "eval_field.json")] + t)
    run(["eval", "--gt", str(w / "gt"), "--pred", str(w / "recon_sart"),
         "--out", str(w / "eval_sart.json")] + t)
    run(["slice", "--vol", str(w / "recon_field"), "--axis", "z",
         "--index", str(args.dims // 2), "--out", str(w / "recon_field_z.pgm")] + t)

    for name in ("eval_field.json", "eval_sart.json"):
        print(f"\n{name}:")
        print((w / name).read_text().rstrip())


if __name__ == "__main__":
    main()
