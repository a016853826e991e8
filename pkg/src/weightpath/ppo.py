"""PPO-clip trainer that generates policy weight trajectories.

Each trial is: collect rollout -> GAE -> clipped-surrogate update, with the
flat policy vector snapshotted on a fixed optimizer-epoch cadence.
Observation normalization uses running mean/var; the final statistics are
frozen into the trajectory metadata so replayed weights see the same input
distribution.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

from . import numcore, policy as pol
from .numcore import AdamState, Tape, vclip, vexp, vminimum
from .envs import make_env
from .policy import PolicyArch, WeightVector, arch_layout, init_policy, orthogonal


class PpoError(RuntimeError):
    pass


@dataclass(frozen=True)
class PpoHyper:
    lr: float = 3e-4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 10
    minibatches: int = 32
    rollout_steps: int = 2048
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    max_grad_norm: float = 0.5
    adam_eps: float = 1e-5
    anneal_lr: bool = True

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise PpoError("gamma and gae_lambda must lie in [0, 1]")
        if self.clip_eps <= 0.0:
            raise PpoError("clip_eps must be positive")
        if self.rollout_steps % self.minibatches != 0:
            raise PpoError("rollout_steps must be divisible by minibatches")

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RolloutBatch:
    obs: np.ndarray           # (T, obs_dim), normalized as seen by the nets
    actions: np.ndarray       # (T, act_dim)
    log_probs_old: np.ndarray  # (T,)
    rewards: np.ndarray       # (T,)
    values: np.ndarray        # (T,)
    dones: np.ndarray         # (T,) float 0/1, episode ended at step t
    bootstrap: float          # value of the state after the last step
    advantages: np.ndarray | None = None  # filled by compute_gae
    returns: np.ndarray | None = None


@dataclass
class WeightTrajectory:
    snapshots: np.ndarray     # (n_snapshots, weight_dim)
    layout: pol.Layout
    meta: dict
    returns: np.ndarray | None = None  # per-snapshot J, NaN where not evaluated

    def __post_init__(self):
        ts = self.meta.get("timestamps")
        if ts is not None and any(b <= a for a, b in zip(ts, ts[1:])):
            raise PpoError("snapshot timestamps must be strictly increasing")

    @property
    def n_snapshots(self) -> int:
        return self.snapshots.shape[0]

    def weight_at(self, i: int) -> WeightVector:
        return WeightVector(self.snapshots[i].copy(), self.layout)


class RunningNorm:
    """Running mean/variance of observations (parallel-variance update)."""

    def __init__(self, dim: int, clip: float = 10.0, eps: float = 1e-8):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 1e-4
        self.clip = clip
        self.eps = eps

    def update(self, x: np.ndarray):
        delta = x - self.mean
        self.count += 1.0
        self.mean = self.mean + delta / self.count
        self.var = self.var + (delta * (x - self.mean) - self.var) / self.count

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return np.clip((x - self.mean) / np.sqrt(self.var + self.eps),
                       -self.clip, self.clip)


class RewardScaler:
    """Scales rewards by the running std of the discounted return.

    Keeps the value-loss magnitude commensurate with the policy surrogate so
    the shared gradient-norm clip does not starve the policy of updates.
    Training-time only: evaluation always uses raw environment rewards.
    """

    def __init__(self, gamma: float, clip: float = 10.0, eps: float = 1e-8):
        self.gamma = gamma
        self.clip = clip
        self.eps = eps
        self.ret = 0.0
        self.mean = 0.0
        self.var = 1.0
        self.count = 1e-4

    def scale(self, reward: float, done: bool) -> float:
        self.ret = self.gamma * self.ret + reward
        delta = self.ret - self.mean
        self.count += 1.0
        self.mean += delta / self.count
        self.var += (delta * (self.ret - self.mean) - self.var) / self.count
        if done:
            self.ret = 0.0
        return float(np.clip(reward / np.sqrt(self.var + self.eps),
                             -self.clip, self.clip))


# -- value network ------------------------------------------------------------


def value_layout(arch: PolicyArch) -> pol.Layout:
    layout = []
    off = 0
    dims = [arch.obs_dim, *arch.hidden]
    for i in range(len(arch.hidden)):
        for name, shape in ((f"l{i}.W", (dims[i], dims[i + 1])),
                            (f"l{i}.b", (dims[i + 1],))):
            layout.append((name, shape, off))
            off += int(np.prod(shape))
    for name, shape in (("v.W", (dims[-1], 1)), ("v.b", (1,))):
        layout.append((name, shape, off))
        off += int(np.prod(shape))
    return layout


def init_value(arch: PolicyArch, seed: int) -> WeightVector:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A10E]))
    layout = value_layout(arch)
    total = layout[-1][2] + 1
    values = np.zeros(total)
    for name, shape, offset in layout:
        if name.endswith(".W"):
            gain = 1.0 if name == "v.W" else float(np.sqrt(2.0))
            values[offset:offset + int(np.prod(shape))] = \
                orthogonal(shape, gain, rng).reshape(-1)
    return WeightVector(values, layout)


def value_forward(vw: WeightVector, obs: np.ndarray) -> np.ndarray:
    tensors = pol.unpack(vw)
    h = np.asarray(obs, dtype=np.float64)
    i = 0
    while f"l{i}.W" in tensors:
        h = np.tanh(h @ tensors[f"l{i}.W"] + tensors[f"l{i}.b"])
        i += 1
    return (h @ tensors["v.W"] + tensors["v.b"])[..., 0]


def _value_forward_var(leaves, obs: np.ndarray):
    tape = next(iter(leaves.values())).tape
    h = tape.leaf(np.asarray(obs, dtype=np.float64), requires_grad=False)
    i = 0
    while f"v_l{i}.W" in leaves:
        h = numcore.vtanh(h @ leaves[f"v_l{i}.W"] + leaves[f"v_l{i}.b"])
        i += 1
    return (h @ leaves["v.W"] + leaves["v.b"])[:, 0]


# -- GAE ----------------------------------------------------------------------


def compute_gae(rewards, values, dones, bootstrap: float, gamma: float,
                lam: float) -> tuple[np.ndarray, np.ndarray]:
    """delta_t = r_t + gamma (1-done_t) V_{t+1} - V_t;
    A_t = delta_t + gamma lam (1-done_t) A_{t+1}; returns = A + V."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    t_len = len(rewards)
    if not (len(values) == len(dones) == t_len):
        raise PpoError("compute_gae inputs must be aligned")
    adv = np.zeros(t_len)
    last = 0.0
    next_v = bootstrap
    for t in range(t_len - 1, -1, -1):
        nonterm = 1.0 - dones[t]
        delta = rewards[t] + gamma * nonterm * next_v - values[t]
        last = delta + gamma * lam * nonterm * last
        adv[t] = last
        next_v = values[t]
    return adv, adv + values


# -- clipped-surrogate update -------------------------------------------------


def _flat(w: WeightVector, vw: WeightVector) -> np.ndarray:
    return np.concatenate([w.values, vw.values])


def ppo_update(w: WeightVector, vw: WeightVector, batch: RolloutBatch,
               hyper: PpoHyper, opt_state: AdamState | None = None,
               lr: float | None = None, rng: np.random.Generator | None = None,
               on_epoch_end=None) -> tuple[WeightVector, WeightVector, AdamState, dict]:
    """PPO-clip epochs over shuffled minibatches with a single Adam over
    [policy | value] parameters and global gradient-norm clipping.

    on_epoch_end(epoch_index, current_policy WeightVector) fires after each
    optimizer epoch (used for snapshotting).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    n = batch.obs.shape[0]
    mb_size = n // hyper.minibatches
    if opt_state is None:
        opt_state = numcore.adam_init(w.dim + vw.dim, lr=hyper.lr,
                                      eps=hyper.adam_eps)
    adv_all, ret_all = batch.advantages, batch.returns  # precomputed by caller
    pi_vals = w.values.copy()
    v_vals = vw.values.copy()
    stats = {"policy_loss": [], "value_loss": [], "entropy": [], "loss": []}
    for epoch in range(hyper.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, mb_size):
            idx = perm[start:start + mb_size]
            adv = adv_all[idx]
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            tape = Tape()
            leaves = {}
            for name, shape, offset in w.layout:
                leaves[name] = tape.leaf(
                    pi_vals[offset:offset + int(np.prod(shape))].reshape(shape))
            vleaves = {}
            for name, shape, offset in vw.layout:
                key = "v_" + name if name.startswith("l") else name
                vleaves[key] = tape.leaf(
                    v_vals[offset:offset + int(np.prod(shape))].reshape(shape))
            mean, log_std = pol.mean_logstd_var(leaves, batch.obs[idx])
            logp, ent = pol.log_prob_entropy_var(mean, log_std, batch.actions[idx])
            ratio = vexp(logp - batch.log_probs_old[idx])
            adv_c = tape.leaf(adv, requires_grad=False)
            surr = vminimum(ratio * adv_c,
                            vclip(ratio, 1.0 - hyper.clip_eps, 1.0 + hyper.clip_eps) * adv_c)
            pg_loss = -surr.mean()
            v_pred = _value_forward_var(vleaves, batch.obs[idx])
            verr = v_pred - ret_all[idx]
            v_loss = (verr * verr).mean() * 0.5
            loss = pg_loss + hyper.vf_coef * v_loss - hyper.ent_coef * ent
            if not np.isfinite(loss.value):
                raise PpoError(f"non-finite PPO loss at epoch {epoch}")
            grads = numcore.backward(tape, loss)
            flat_g = np.empty(w.dim + vw.dim)
            for name, shape, offset in w.layout:
                flat_g[offset:offset + int(np.prod(shape))] = \
                    numcore.grad_of(grads, leaves[name]).reshape(-1)
            for name, shape, offset in vw.layout:
                key = "v_" + name if name.startswith("l") else name
                flat_g[w.dim + offset:w.dim + offset + int(np.prod(shape))] = \
                    numcore.grad_of(grads, vleaves[key]).reshape(-1)
            flat_g = numcore.clip_grad_norm(flat_g, hyper.max_grad_norm)
            flat_p = np.concatenate([pi_vals, v_vals])
            flat_p, opt_state = numcore.adam_step(flat_p, flat_g, opt_state, lr=lr)
            pi_vals = flat_p[:w.dim]
            v_vals = flat_p[w.dim:]
            stats["policy_loss"].append(float(pg_loss.value))
            stats["value_loss"].append(float(v_loss.value))
            stats["entropy"].append(float(ent.value))
            stats["loss"].append(float(loss.value))
        if on_epoch_end is not None:
            on_epoch_end(epoch, WeightVector(pi_vals.copy(), w.layout))
    return (WeightVector(pi_vals, w.layout), WeightVector(v_vals, vw.layout),
            opt_state, {k: float(np.mean(v)) for k, v in stats.items()})


# -- trial driver -------------------------------------------------------------


def collect_rollout(env, w: WeightVector, vw: WeightVector, norm: RunningNorm,
                    hyper: PpoHyper, action_rng: np.random.Generator,
                    reset_rng: np.random.Generator, state: dict,
                    reward_scaler: RewardScaler | None = None) -> RolloutBatch:
    """Collect hyper.rollout_steps transitions, resetting episodes as needed.

    `state` carries the current raw observation between rollouts
    (keys: "obs" raw obs or None, "needs_reset").
    """
    t_len = hyper.rollout_steps
    policy_fast = pol._layers_from_layout(w)
    hidden, mw, mb, log_std = policy_fast
    std = np.exp(np.clip(log_std, pol.LOG_STD_MIN, pol.LOG_STD_MAX))
    obs_buf = np.empty((t_len, env.spec.obs_dim))
    act_buf = np.empty((t_len, env.spec.act_dim))
    logp_buf = np.empty(t_len)
    rew_buf = np.empty(t_len)
    val_buf = np.empty(t_len)
    done_buf = np.zeros(t_len)
    raw_obs = state.get("obs")
    if raw_obs is None:
        raw_obs = env.reset(int(reset_rng.integers(2 ** 31)))
        norm.update(raw_obs)
    for t in range(t_len):
        nobs = norm.normalize(raw_obs)
        h = nobs
        for lw, lb in hidden:
            h = np.tanh(h @ lw + lb)
        mean = h @ mw + mb
        action = mean + std * action_rng.standard_normal(mean.shape)
        logp = float(pol.log_prob(mean, std, action))
        obs_buf[t] = nobs
        act_buf[t] = action
        logp_buf[t] = logp
        val_buf[t] = value_forward(vw, nobs)
        res = env.step(action)
        ended = res.done or res.truncated
        rew_buf[t] = (res.reward if reward_scaler is None
                      else reward_scaler.scale(res.reward, ended))
        if ended:
            done_buf[t] = 1.0
            raw_obs = env.reset(int(reset_rng.integers(2 ** 31)))
        else:
            raw_obs = res.next_obs
        norm.update(raw_obs)
    state["obs"] = raw_obs
    bootstrap = float(value_forward(vw, norm.normalize(raw_obs)))
    return RolloutBatch(obs_buf, act_buf, logp_buf, rew_buf, val_buf,
                        done_buf, bootstrap)


def run_trial(env_id: str, seed: int, total_steps: int, snapshot_every: int = 1,
              hyper: PpoHyper | None = None, hidden: tuple[int, ...] = (8, 8),
              eval_every_iters: int = 0, eval_episodes: int = 10,
              eval_snapshots: bool = False) -> WeightTrajectory:
    """Run one PPO trial, snapshotting the flat policy vector every
    `snapshot_every` optimizer epochs. snapshots[0] is the initialization.

    eval_every_iters > 0 appends (global_step, mean deterministic return)
    entries to meta["eval_log"]. Deterministic given (seed, config).
    """
    hyper = hyper or PpoHyper()
    if total_steps < hyper.rollout_steps:
        raise PpoError("total_steps must be at least one rollout")
    env = make_env(env_id)
    arch = PolicyArch(env.spec.obs_dim, env.spec.act_dim, tuple(hidden))
    w = init_policy(arch, seed)
    vw = init_value(arch, seed)
    norm = RunningNorm(env.spec.obs_dim)
    rscale = RewardScaler(hyper.gamma)
    action_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    reset_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    update_rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    opt_state = numcore.adam_init(w.dim + vw.dim, lr=hyper.lr, eps=hyper.adam_eps)
    snapshots = [w.values.copy()]
    timestamps = [0]
    eval_log = []
    truncated_flag = False
    iters = total_steps // hyper.rollout_steps
    epoch_counter = 0
    roll_state: dict = {"obs": None}
    for it in range(iters):
        lr = hyper.lr * (1.0 - it / iters) if hyper.anneal_lr else hyper.lr
        batch = collect_rollout(env, w, vw, norm, hyper, action_rng,
                                reset_rng, roll_state, reward_scaler=rscale)
        adv, ret = compute_gae(batch.rewards, batch.values, batch.dones,
                               batch.bootstrap, hyper.gamma, hyper.gae_lambda)
        batch.advantages = adv
        batch.returns = ret

        def on_epoch(_epoch, cur_w):
            nonlocal epoch_counter
            epoch_counter += 1
            if epoch_counter % snapshot_every == 0:
                snapshots.append(cur_w.values.copy())
                timestamps.append(epoch_counter)

        try:
            w, vw, opt_state, _stats = ppo_update(
                w, vw, batch, hyper, opt_state, lr=lr, rng=update_rng,
                on_epoch_end=on_epoch)
        except PpoError:
            truncated_flag = True
            break
        if not np.all(np.isfinite(w.values)):
            truncated_flag = True
            break
        if eval_every_iters and (it + 1) % eval_every_iters == 0:
            ret_mean = pol.evaluate_return(
                w, env_id, episodes=eval_episodes, seed=seed * 10_000 + it,
                deterministic=True, obs_mean=norm.mean, obs_var=norm.var)
            eval_log.append([(it + 1) * hyper.rollout_steps, ret_mean])
    meta = {
        "env_id": env_id,
        "seed": seed,
        "algorithm": "ppo-clip",
        "snapshot_every": snapshot_every,
        "hyper_hash": hyper.hash(),
        "hyper": asdict(hyper),
        "hidden": list(hidden),
        "total_steps": total_steps,
        "timestamps": timestamps,
        "obs_mean": norm.mean.tolist(),
        "obs_var": norm.var.tolist(),
        "eval_log": eval_log,
        "truncated": truncated_flag,
    }
    traj = WeightTrajectory(np.asarray(snapshots), arch_layout(arch), meta)
    if eval_snapshots:
        returns = np.empty(traj.n_snapshots)
        for i in range(traj.n_snapshots):
            returns[i] = pol.evaluate_return(
                traj.weight_at(i), env_id, episodes=eval_episodes,
                seed=seed * 10_000 + 7919 + i, deterministic=True,
                obs_mean=norm.mean, obs_var=norm.var)
        traj.returns = returns
    return traj
