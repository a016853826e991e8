"""Pipeline driver: collect -> encode -> train -> evaluate -> report.

Stages are idempotent: each writes a manifest recording the config hash
and input hashes, and a rerun with identical inputs is a no-op. Exit
codes: 0 success, 2 config error, 3 stage failure, 4 IO/format error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict, fields

import numpy as np

from . import evalkit, fileio, oracle, ppo, svdcodec, tipl
from .fileio import FormatError


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    # collection
    env: str = "cartpole"
    trials: int = 10
    total_steps: int = 150_000
    snapshot_every: int = 1
    base_seed: int = 0
    hidden: tuple[int, ...] = (8, 8)
    eval_every_iters: int = 5
    eval_episodes: int = 10
    # oracle collection
    oracle_dim: int = 64
    oracle_trajs: int = 40
    oracle_steps: int = 200
    oracle_alpha: float = 0.5
    oracle_sigma: float = 0.0
    # codec: one basis on the pooled training corpus, or one per trajectory
    # (weights of independently initialized runs rarely share a low-dim span,
    # so cross-trial evaluation needs per-trial bases)
    basis_scope: str = "pooled"
    d: int = 16
    # transformer (defaults mirror tipl.TiplConfig)
    context_len: int = 20
    embed_dim: int = 128
    layers: int = 3
    heads: int = 1
    dropout: float = 0.1
    lr: float = 1e-4
    warmup_steps: int = 1000
    weight_decay: float = 1e-4
    batch_size: int = 64
    batches_per_iter: int = 2000
    iters: int = 10
    grad_clip: float = 0.25
    train_frac: float = 0.8
    tipl_seed: int = 0
    # evaluation
    prefix_len: int = 20
    k: int = 10
    episodes: int = 20
    eval_seed: int = 0
    prefix_stride: int = 10
    max_prefixes: int = 20
    # paths
    out_dir: str = "out"

    def __post_init__(self):
        for name in ("trials", "total_steps", "snapshot_every", "d",
                     "prefix_len", "k", "episodes", "oracle_trajs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.basis_scope not in ("pooled", "per-trial"):
            raise ConfigError("basis_scope must be 'pooled' or 'per-trial'")

    def tipl_config(self, d_token: int) -> tipl.TiplConfig:
        return tipl.TiplConfig(
            d_token=d_token, context_len=self.context_len,
            embed_dim=self.embed_dim, layers=self.layers, heads=self.heads,
            dropout=self.dropout, lr=self.lr, warmup_steps=self.warmup_steps,
            weight_decay=self.weight_decay, batch_size=self.batch_size,
            batches_per_iter=self.batches_per_iter, iters=self.iters,
            grad_clip=self.grad_clip)


def worker_count() -> int:
    cap = os.environ.get("WEIGHTPATH_WORKERS")
    if cap is not None:
        return max(1, int(cap))
    return os.cpu_count() or 1


def parallel_map(fn, items):
    """Map preserving order; fans out to processes when workers > 1."""
    workers = worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


# -- manifests ----------------------------------------------------------------


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest_path(cfg: PipelineConfig, stage: str) -> str:
    return os.path.join(cfg.out_dir, f"stage_{stage}.manifest.json")


def _stage_fresh(cfg: PipelineConfig, stage: str, config_slice: dict,
                 inputs: list[str], outputs: list[str]) -> bool:
    """True when a prior run of this stage with this config/inputs exists
    and all its outputs are still present."""
    mpath = _manifest_path(cfg, stage)
    if not os.path.exists(mpath):
        return False
    try:
        with open(mpath) as f:
            m = json.load(f)
    except (OSError, json.JSONDecodeError):
        return False
    if m.get("config") != config_slice:
        return False
    if m.get("inputs") != {p: _sha256_file(p) for p in inputs}:
        return False
    return all(os.path.exists(p) for p in m.get("outputs", []))


def _write_manifest(cfg: PipelineConfig, stage: str, config_slice: dict,
                    inputs: list[str], outputs: list[str]):
    manifest = {
        "stage": stage,
        "config": config_slice,
        "inputs": {p: _sha256_file(p) for p in inputs},
        "outputs": outputs,
    }
    with open(_manifest_path(cfg, stage), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def _slice(cfg: PipelineConfig, names: list[str]) -> dict:
    d = asdict(cfg)
    return {n: (list(d[n]) if isinstance(d[n], tuple) else d[n]) for n in names}


# -- stages ---------------------------------------------------------------


def traj_paths(cfg: PipelineConfig) -> list[str]:
    return sorted(
        os.path.join(cfg.out_dir, f)
        for f in os.listdir(cfg.out_dir)
        if f.startswith("traj_") and f.endswith(".wtrj")) \
        if os.path.isdir(cfg.out_dir) else []


def basis_path(cfg: PipelineConfig) -> str:
    return os.path.join(cfg.out_dir, "basis.wsvd")


def per_trial_basis_path(cfg: PipelineConfig, traj_path: str) -> str:
    stem = os.path.splitext(os.path.basename(traj_path))[0]
    return os.path.join(cfg.out_dir, stem.replace("traj_", "basis_") + ".wsvd")


def ckpt_path(cfg: PipelineConfig) -> str:
    return os.path.join(cfg.out_dir, "model.tipl")


def _collect_one(args):
    cfg_dict, index = args
    cfg = PipelineConfig(**cfg_dict)
    traj = ppo.run_trial(cfg.env, cfg.base_seed + index, cfg.total_steps,
                         cfg.snapshot_every, hidden=tuple(cfg.hidden),
                         eval_every_iters=cfg.eval_every_iters,
                         eval_episodes=cfg.eval_episodes)
    path = os.path.join(cfg.out_dir, f"traj_{index:03d}.wtrj")
    fileio.save_trajectory(traj, path)
    return path


def stage_collect(cfg: PipelineConfig) -> list[str]:
    os.makedirs(cfg.out_dir, exist_ok=True)
    keys = ["env", "trials", "total_steps", "snapshot_every", "base_seed",
            "hidden", "eval_every_iters", "eval_episodes"]
    expected = [os.path.join(cfg.out_dir, f"traj_{i:03d}.wtrj")
                for i in range(cfg.trials)]
    if _stage_fresh(cfg, "collect", _slice(cfg, keys), [], expected):
        print("[collect] up to date, skipping")
        return expected
    cfg_dict = asdict(cfg)
    cfg_dict["hidden"] = tuple(cfg.hidden)
    paths = parallel_map(_collect_one, [(cfg_dict, i) for i in range(cfg.trials)])
    _write_manifest(cfg, "collect", _slice(cfg, keys), [], paths)
    print(f"[collect] wrote {len(paths)} trajectory files")
    return paths


def stage_collect_oracle(cfg: PipelineConfig) -> list[str]:
    os.makedirs(cfg.out_dir, exist_ok=True)
    keys = ["oracle_dim", "oracle_trajs", "oracle_steps", "oracle_alpha",
            "oracle_sigma", "base_seed"]
    expected = [os.path.join(cfg.out_dir, f"traj_{i:03d}.wtrj")
                for i in range(cfg.oracle_trajs)]
    if _stage_fresh(cfg, "collect", _slice(cfg, keys), [], expected):
        print("[collect-oracle] up to date, skipping")
        return expected
    sys_ = oracle.make_system(cfg.oracle_dim, cfg.base_seed,
                              alpha=cfg.oracle_alpha,
                              sigma_noise=cfg.oracle_sigma)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.base_seed, 0xF00]))
    paths = []
    layout = [("phi", (cfg.oracle_dim,), 0)]
    for i in range(cfg.oracle_trajs):
        phi0 = rng.standard_normal(cfg.oracle_dim)
        snaps = oracle.gen_trajectory(sys_, phi0, cfg.oracle_steps,
                                      seed=cfg.base_seed + i)
        meta = {
            "env_id": "quadratic", "seed": cfg.base_seed + i,
            "algorithm": "quadratic-gd",
            "snapshot_every": 1, "hyper_hash": "",
            "timestamps": list(range(cfg.oracle_steps + 1)),
            "oracle": {"n": cfg.oracle_dim, "alpha": cfg.oracle_alpha,
                       "sigma": cfg.oracle_sigma, "system_seed": cfg.base_seed},
        }
        path = os.path.join(cfg.out_dir, f"traj_{i:03d}.wtrj")
        fileio.save_trajectory(ppo.WeightTrajectory(snaps, layout, meta), path)
        paths.append(path)
    _write_manifest(cfg, "collect", _slice(cfg, keys), [], paths)
    print(f"[collect-oracle] wrote {len(paths)} trajectory files")
    return paths


def split_trials(paths: list[str], train_frac: float) -> tuple[list[str], list[str]]:
    """80/20 split by whole trial (sorted path order)."""
    n_train = max(1, int(round(train_frac * len(paths))))
    if n_train == len(paths) and len(paths) > 1:
        n_train -= 1
    return paths[:n_train], paths[n_train:]


def stage_encode(cfg: PipelineConfig) -> list[str]:
    paths = traj_paths(cfg)
    if not paths:
        raise StageError("encode: no trajectory files found; run collect first")
    keys = ["d", "train_frac", "basis_scope"]
    if cfg.basis_scope == "per-trial":
        outs = [per_trial_basis_path(cfg, p) for p in paths]
        if _stage_fresh(cfg, "encode", _slice(cfg, keys), paths, outs):
            print("[encode] up to date, skipping")
            return outs
        for p, out in zip(paths, outs):
            t = fileio.load_trajectory(p)
            basis = svdcodec.fit_basis(t.snapshots, cfg.d, layout=t.layout)
            fileio.save_basis(basis, out)
        _write_manifest(cfg, "encode", _slice(cfg, keys), paths, outs)
        print(f"[encode] fitted {len(outs)} per-trial rank-{cfg.d} bases")
        return outs
    out = basis_path(cfg)
    if _stage_fresh(cfg, "encode", _slice(cfg, keys), paths, [out]):
        print("[encode] up to date, skipping")
        return [out]
    train_paths, _ = split_trials(paths, cfg.train_frac)
    rows = []
    layout = None
    for p in train_paths:
        t = fileio.load_trajectory(p)
        rows.append(t.snapshots)
        layout = t.layout
    corpus = np.vstack(rows)
    basis = svdcodec.fit_basis(corpus, cfg.d, layout=layout)
    fileio.save_basis(basis, out)
    _write_manifest(cfg, "encode", _slice(cfg, keys), paths, [out])
    energy = basis.energy[cfg.d - 1] if cfg.d <= len(basis.energy) else 1.0
    print(f"[encode] fitted rank-{cfg.d} basis on {corpus.shape[0]} rows, "
          f"energy {energy:.4f}")
    return [out]


def _basis_for(cfg: PipelineConfig, traj_path: str) -> str:
    if cfg.basis_scope == "per-trial":
        return per_trial_basis_path(cfg, traj_path)
    return basis_path(cfg)


def stage_train(cfg: PipelineConfig) -> str:
    paths = traj_paths(cfg)
    bpaths = sorted({_basis_for(cfg, p) for p in paths})
    if not paths or not all(os.path.exists(b) for b in bpaths):
        raise StageError("train: need trajectories and fitted bases")
    keys = ["d", "train_frac", "basis_scope", "context_len", "embed_dim",
            "layers", "heads", "dropout", "lr", "warmup_steps",
            "weight_decay", "batch_size", "batches_per_iter", "iters",
            "grad_clip", "tipl_seed"]
    out = ckpt_path(cfg)
    inputs = paths + bpaths
    if _stage_fresh(cfg, "train", _slice(cfg, keys), inputs, [out]):
        print("[train] up to date, skipping")
        return out
    train_paths, _ = split_trials(paths, cfg.train_frac)
    trajs = []
    for p in train_paths:
        basis = fileio.load_basis(_basis_for(cfg, p))
        t = fileio.load_trajectory(p)
        trajs.append(svdcodec.standardize(basis, svdcodec.encode(basis, t.snapshots)))
    model = tipl.init_model(cfg.tipl_config(cfg.d), cfg.tipl_seed)
    model, history = tipl.train(model, trajs, seed=cfg.tipl_seed, log_every=1)
    fileio.save_checkpoint(model, out, extra_meta={"loss_history": history})
    _write_manifest(cfg, "train", _slice(cfg, keys), inputs, [out])
    print(f"[train] final iteration loss {history[-1]:.6g}")
    return out


def stage_evaluate(cfg: PipelineConfig) -> tuple[str, str]:
    paths = traj_paths(cfg)
    bpaths = sorted({_basis_for(cfg, p) for p in paths})
    cpath = ckpt_path(cfg)
    if not paths or not all(os.path.exists(b) for b in bpaths) \
            or not os.path.exists(cpath):
        raise StageError("evaluate: need trajectories, bases, and checkpoint")
    keys = ["train_frac", "basis_scope", "prefix_len", "k", "episodes",
            "eval_seed", "prefix_stride", "max_prefixes"]
    csv_out = os.path.join(cfg.out_dir, "report.csv")
    json_out = os.path.join(cfg.out_dir, "report.json")
    inputs = paths + bpaths + [cpath]
    if _stage_fresh(cfg, "evaluate", _slice(cfg, keys), inputs,
                    [csv_out, json_out]):
        print("[evaluate] up to date, skipping")
        return csv_out, json_out
    model = fileio.load_checkpoint(cpath)
    _, held_paths = split_trials(paths, cfg.train_frac)
    reports = []
    for p in held_paths:
        basis = fileio.load_basis(_basis_for(cfg, p))
        t = fileio.load_trajectory(p)
        trial_id = int(t.meta.get("seed", 0))
        reports.append(evalkit.forward_eval(
            model, basis, t, cfg.prefix_len, cfg.k,
            episodes=cfg.episodes, seed=cfg.eval_seed, trial_id=trial_id,
            prefix_stride=cfg.prefix_stride, max_prefixes=cfg.max_prefixes))
    merged = evalkit.merge_reports(reports)
    evalkit.write_report(merged, csv_out, json_out)
    _write_manifest(cfg, "evaluate", _slice(cfg, keys), inputs,
                    [csv_out, json_out])
    print(f"[evaluate] wrote {len(merged.rows)} rows over "
          f"{len(held_paths)} held-out trials")
    return csv_out, json_out


def stage_report(cfg: PipelineConfig):
    json_out = os.path.join(cfg.out_dir, "report.json")
    if not os.path.exists(json_out):
        raise StageError("report: no report.json; run evaluate first")
    with open(json_out) as f:
        summary = json.load(f)
    print(json.dumps(summary, indent=2))


# -- argument parsing ----------------------------------------------------------


STAGES = {
    "collect": stage_collect,
    "collect-oracle": stage_collect_oracle,
    "encode": stage_encode,
    "train": stage_train,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="JSON config file (flags override it)")
    for f in fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "hidden":
            parser.add_argument(flag, type=lambda s: tuple(
                int(x) for x in s.split(",")), default=None,
                help="comma-separated hidden widths")
        elif f.type in ("int", int):
            parser.add_argument(flag, type=int, default=None)
        elif f.type in ("float", float):
            parser.add_argument(flag, type=float, default=None)
        else:
            parser.add_argument(flag, default=None)


def load_config(args: argparse.Namespace) -> PipelineConfig:
    values = {}
    if args.config:
        with open(args.config) as f:
            values.update(json.load(f))
    for f in fields(PipelineConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    if "hidden" in values:
        values["hidden"] = tuple(values["hidden"])
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return PipelineConfig(**values)


def run_pipeline(cfg: PipelineConfig, stages: list[str]) -> int:
    for name in stages:
        STAGES[name](cfg)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="weightpath",
        description="Policy weight trajectory pipeline: collect, encode, "
                    "train, evaluate, report.")
    sub = parser.add_subparsers(dest="stage", required=True)
    for name in list(STAGES) + ["pipeline"]:
        p = sub.add_parser(name)
        _add_config_flags(p)
        if name == "pipeline":
            p.add_argument("--stages", default="collect,encode,train,evaluate,report",
                           help="comma-separated stage list")
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        cfg = load_config(args)
    except (ConfigError, ValueError, OSError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        if args.stage == "pipeline":
            stages = [s.strip() for s in args.stages.split(",") if s.strip()]
            bad = [s for s in stages if s not in STAGES]
            if bad:
                print(f"config error: unknown stages {bad}", file=sys.stderr)
                return 2
            return run_pipeline(cfg, stages)
        return run_pipeline(cfg, [args.stage])
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return 4
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 4
    except Exception as e:  # noqa: BLE001 - stage failures become exit code 3
        print(f"stage failure ({args.stage}): {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
