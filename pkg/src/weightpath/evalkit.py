"""Evaluation of predicted weights: weight prediction error (WPE), return
error of predicted weight (REPW), multi-step forward-prediction curves, and
true-vs-predicted return scatter.

Return evaluations of the true/predicted pair share the same episode seeds
so REPW isolates weight differences from environment stochasticity.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import policy as pol, svdcodec, tipl
from .envs import ENV_REGISTRY
from .ppo import WeightTrajectory


class EvalError(ValueError):
    pass


@dataclass
class EvalRow:
    step: int          # forward prediction step, 1-based
    trial: int
    snapshot: int      # index of the true snapshot being predicted
    wpe: float
    repw: float
    j_true: float
    j_pred: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    baseline_wpe: dict[int, list[float]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def per_step(self, attr: str) -> dict[int, list[float]]:
        out: dict[int, list[float]] = {}
        for r in self.rows:
            out.setdefault(r.step, []).append(getattr(r, attr))
        return out

    def median_per_step(self, attr: str) -> dict[int, float]:
        return {s: float(np.median(v)) for s, v in sorted(self.per_step(attr).items())}


def wpe(true_w: np.ndarray, pred_w: np.ndarray) -> float:
    """Mean squared elementwise difference between weight vectors."""
    true_w = np.asarray(true_w, dtype=np.float64)
    pred_w = np.asarray(pred_w, dtype=np.float64)
    if true_w.shape != pred_w.shape:
        raise EvalError(f"length mismatch: {true_w.shape} vs {pred_w.shape}")
    d = true_w - pred_w
    return float(np.mean(d * d))


def repw(j_true: float, j_pred: float) -> float:
    """Absolute difference of episodic returns."""
    return float(abs(j_true - j_pred))


def forward_eval(model: tipl.TiplModel, basis: svdcodec.SvdBasis,
                 traj: WeightTrajectory, prefix_len: int, k: int = 10,
                 env_id: str | None = None, episodes: int = 20,
                 seed: int = 0, trial_id: int = 0,
                 prefix_stride: int = 10, max_prefixes: int = 20,
                 rollout_fn=None, _j_true_cache: dict | None = None) -> EvalReport:
    """Roll the model k steps past true prefixes of one held-out trajectory.

    Prefix starts are every `prefix_stride`-th valid position, capped at
    `max_prefixes`. For forward step j the prediction is compared against
    true snapshot (start + prefix_len + j - 1) in weight space (WPE) and,
    if env_id is given, in return space (REPW) with paired episode seeds.
    """
    n = traj.n_snapshots
    if n < prefix_len + k:
        raise EvalError(f"trajectory has {n} snapshots, need >= {prefix_len + k}")
    meta = traj.meta
    obs_mean = meta.get("obs_mean")
    obs_var = meta.get("obs_var")
    env_id = env_id or meta.get("env_id")
    if env_id is not None and env_id not in ENV_REGISTRY:
        env_id = None  # synthetic trajectory: weight-space evaluation only
    starts = list(range(0, n - prefix_len - k + 1, prefix_stride))[:max_prefixes]
    report = EvalReport(config={
        "prefix_len": prefix_len, "k": k, "episodes": episodes, "seed": seed,
        "prefix_stride": prefix_stride, "max_prefixes": max_prefixes,
        "env_id": env_id,
    })
    cache = _j_true_cache if _j_true_cache is not None else {}

    def j_of(values: np.ndarray, snap_idx: int, predicted: bool) -> float:
        # paired seeds: both members of a (true, predicted) pair use the
        # eval seed derived from (trial, snapshot index)
        ev_seed = (seed * 1_000_003 + trial_id * 7919 + snap_idx) % (2 ** 31)
        if not predicted and snap_idx in cache:
            return cache[snap_idx]
        w = pol.WeightVector(np.asarray(values, dtype=np.float64).copy(),
                             traj.layout)
        j = pol.evaluate_return(w, env_id, episodes=episodes, seed=ev_seed,
                                deterministic=True, obs_mean=obs_mean,
                                obs_var=obs_var)
        if not predicted:
            cache[snap_idx] = j
        return j

    roll = rollout_fn if rollout_fn is not None else tipl.rollout
    for start in starts:
        prefix = traj.snapshots[start:start + prefix_len]
        preds = roll(model, basis, prefix, k)
        for j in range(1, k + 1):
            snap_idx = start + prefix_len + j - 1
            true_row = traj.snapshots[snap_idx]
            pred_row = preds[j - 1]
            roundtrip = svdcodec.decode(basis, svdcodec.encode(basis, true_row))
            report.baseline_wpe.setdefault(j, []).append(wpe(true_row, roundtrip))
            if env_id is not None:
                jt = j_of(true_row, snap_idx, predicted=False)
                jp = j_of(pred_row, snap_idx, predicted=True)
            else:
                jt = jp = float("nan")
            report.rows.append(EvalRow(j, trial_id, snap_idx,
                                       wpe(true_row, pred_row), repw(jt, jp),
                                       jt, jp))
    return report


def merge_reports(reports: list[EvalReport]) -> EvalReport:
    merged = EvalReport(config=reports[0].config if reports else {})
    for r in reports:
        merged.rows.extend(r.rows)
        for s, v in r.baseline_wpe.items():
            merged.baseline_wpe.setdefault(s, []).extend(v)
    return merged


def scatter_table(report: EvalReport):
    """(J_true, J_pred) table plus Pearson/Spearman (None if undefined)."""
    pts = [(r.j_true, r.j_pred) for r in report.rows
           if np.isfinite(r.j_true) and np.isfinite(r.j_pred)]
    if len(pts) < 2:
        raise EvalError("need >= 2 scatter points for correlations")
    jt = np.array([p[0] for p in pts])
    jp = np.array([p[1] for p in pts])
    if np.ptp(jt) == 0.0 or np.ptp(jp) == 0.0:
        pearson = spearman = None
    else:
        pearson = float(sps.pearsonr(jt, jp).statistic)
        spearman = float(sps.spearmanr(jt, jp).statistic)
    return pts, pearson, spearman


def write_report(report: EvalReport, csv_path, json_path=None):
    """CSV with header step,trial,snapshot,wpe,repw,j_true,j_pred (9
    significant digits), plus an optional JSON summary."""
    with open(csv_path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["step", "trial", "snapshot", "wpe", "repw",
                     "j_true", "j_pred"])
        for r in report.rows:
            wr.writerow([r.step, r.trial, r.snapshot,
                         f"{r.wpe:.9g}", f"{r.repw:.9g}",
                         f"{r.j_true:.9g}", f"{r.j_pred:.9g}"])
    if json_path is not None:
        try:
            _, pearson, spearman = scatter_table(report)
        except EvalError:
            pearson = spearman = None
        summary = {
            "pearson": pearson,
            "spearman": spearman,
            "median_wpe_per_step": report.median_per_step("wpe"),
            "median_repw_per_step": report.median_per_step("repw"),
            "median_baseline_wpe_per_step": {
                s: float(np.median(v))
                for s, v in sorted(report.baseline_wpe.items())},
            "n_rows": len(report.rows),
            "config": report.config,
        }
        with open(json_path, "w") as f:
            json.dump(summary, f, indent=2)


def read_report_csv(path) -> EvalReport:
    report = EvalReport()
    with open(path) as f:
        rd = csv.DictReader(f)
        for row in rd:
            report.rows.append(EvalRow(
                int(row["step"]), int(row["trial"]), int(row["snapshot"]),
                float(row["wpe"]), float(row["repw"]),
                float(row["j_true"]), float(row["j_pred"])))
    return report
