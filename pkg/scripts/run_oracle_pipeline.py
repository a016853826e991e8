#!/usr/bin/env python3
"""Synthetic-dynamics experiment: quadratic-descent weight trajectories with
a known closed form, compressed and predicted by the same codec + transformer
stack. Ground truth is exact, so this isolates modeling error from RL noise.
"""

import argparse
import sys

from weightpath.cli import main as cli_main


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="out/oracle")
    ap.add_argument("--trajs", type=int, default=40)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--d", type=int, default=8)
    args = ap.parse_args(argv)

    flags = ["pipeline",
             "--stages", "collect-oracle,encode,train,evaluate,report",
             "--oracle-trajs", str(args.trajs),
             "--oracle-steps", str(args.steps),
             "--oracle-dim", str(args.dim),
             "--d", str(args.d),
             "--embed-dim", "64", "--layers", "2", "--dropout", "0.0",
             "--lr", "1e-3", "--warmup-steps", "100",
             "--batches-per-iter", "300", "--iters", "8",
             "--out-dir", args.out_dir]
    return cli_main(flags)


if __name__ == "__main__":
    sys.exit(run())
