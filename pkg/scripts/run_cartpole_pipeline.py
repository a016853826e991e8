#!/usr/bin/env python3
"""Desk-scale cart-pole experiment: collect PPO weight trajectories, fit the
SVD codec, train the next-weight predictor, and evaluate on held-out trials.

Writes trajectories, basis, checkpoint, and CSV/JSON reports under --out-dir.
Stages are idempotent; rerunning skips anything already up to date.
"""

import argparse
import sys

from weightpath.cli import main as cli_main


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="out/cartpole")
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--total-steps", type=int, default=151_552)
    ap.add_argument("--d", type=int, default=16)
    ap.add_argument("--fast", action="store_true",
                    help="smaller transformer (embed 64, 2 layers) sized for "
                         "a single CPU core")
    args = ap.parse_args(argv)

    flags = ["pipeline",
             "--stages", "collect,encode,train,evaluate,report",
             "--env", "cartpole",
             "--trials", str(args.trials),
             "--total-steps", str(args.total_steps),
             "--d", str(args.d),
             "--basis-scope", "per-trial",
             "--prefix-stride", "35",
             "--out-dir", args.out_dir]
    if args.fast:
        flags += ["--embed-dim", "64", "--layers", "2", "--dropout", "0.0",
                  "--lr", "1e-3", "--warmup-steps", "100",
                  "--batches-per-iter", "300", "--iters", "8"]
    return cli_main(flags)


if __name__ == "__main__":
    sys.exit(run())
