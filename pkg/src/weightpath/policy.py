"""Gaussian tanh-MLP policy and the flat weight vector that forms the
trajectory tokens.

The flat vector includes the state-independent log_std parameters; the
value network is a separate object (see ppo) and is not part of it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore
from .envs import make_env
from .numcore import Tape, Var, vtanh

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
LOG_2PI = float(np.log(2.0 * np.pi))


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyArch:
    obs_dim: int
    act_dim: int
    hidden: tuple[int, ...] = (8, 8)

    def __post_init__(self):
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise PolicyError(f"invalid hidden widths {self.hidden}")


Layout = list[tuple[str, tuple[int, ...], int]]


@dataclass(frozen=True, eq=False)
class WeightVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        _check_layout(self.layout, self.values.shape[0])

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def _check_layout(layout: Layout, total: int):
    off = 0
    for name, shape, offset in layout:
        if offset != off:
            raise PolicyError(
                f"layout offsets not contiguous/ascending at {name!r}: "
                f"expected {off}, got {offset}")
        off += int(np.prod(shape))
    if off != total:
        raise PolicyError(f"layout covers {off} values, vector has {total}")


def arch_layout(arch: PolicyArch) -> Layout:
    layout: Layout = []
    off = 0
    dims = [arch.obs_dim, *arch.hidden]
    for i in range(len(arch.hidden)):
        for name, shape in ((f"l{i}.W", (dims[i], dims[i + 1])),
                            (f"l{i}.b", (dims[i + 1],))):
            layout.append((name, shape, off))
            off += int(np.prod(shape))
    for name, shape in (("mean.W", (dims[-1], arch.act_dim)),
                        ("mean.b", (arch.act_dim,)),
                        ("log_std", (arch.act_dim,))):
        layout.append((name, shape, off))
        off += int(np.prod(shape))
    return layout


def orthogonal(shape: tuple[int, int], gain: float,
               rng: np.random.Generator) -> np.ndarray:
    """Orthogonal init (QR with sign correction), scaled by gain."""
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_policy(arch: PolicyArch, seed: int) -> WeightVector:
    """Orthogonal weights (hidden gain sqrt(2), mean head 0.01), zero
    biases, log_std = 0. Deterministic given seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x90110]))
    layout = arch_layout(arch)
    values = np.zeros(layout[-1][2] + arch.act_dim)
    n_hidden = len(arch.hidden)
    for name, shape, offset in layout:
        if name.endswith(".W"):
            gain = 0.01 if name == "mean.W" else float(np.sqrt(2.0))
            values[offset:offset + shape[0] * shape[1]] = \
                orthogonal(shape, gain, rng).reshape(-1)
    assert n_hidden >= 1
    return WeightVector(values, layout)


def unpack(w: WeightVector) -> dict[str, np.ndarray]:
    out = {}
    for name, shape, offset in w.layout:
        n = int(np.prod(shape))
        out[name] = w.values[offset:offset + n].reshape(shape)
    return out


def pack(tensors: dict[str, np.ndarray], layout: Layout) -> WeightVector:
    total = layout[-1][2] + int(np.prod(layout[-1][1]))
    values = np.empty(total)
    for name, shape, offset in layout:
        if name not in tensors:
            raise PolicyError(f"missing tensor {name!r}")
        t = np.asarray(tensors[name], dtype=np.float64)
        if t.shape != tuple(shape):
            raise PolicyError(f"tensor {name!r} has shape {t.shape}, layout says {shape}")
        values[offset:offset + t.size] = t.reshape(-1)
    return WeightVector(values, layout)


def _layers_from_layout(w: WeightVector):
    tensors = unpack(w)
    hidden = []
    i = 0
    while f"l{i}.W" in tensors:
        hidden.append((tensors[f"l{i}.W"], tensors[f"l{i}.b"]))
        i += 1
    return hidden, tensors["mean.W"], tensors["mean.b"], tensors["log_std"]


def mlp_mean(w: WeightVector, obs: np.ndarray) -> np.ndarray:
    """Mean head of the Gaussian: tanh MLP forward (numpy fast path)."""
    hidden, mw, mb, _ = _layers_from_layout(w)
    h = np.asarray(obs, dtype=np.float64)
    for lw, lb in hidden:
        h = np.tanh(h @ lw + lb)
    return h @ mw + mb


def action_dist(w: WeightVector, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(mean, std) of the diagonal Gaussian at obs."""
    obs = np.asarray(obs, dtype=np.float64)
    if not np.all(np.isfinite(obs)):
        raise PolicyError("non-finite observation")
    mean = mlp_mean(w, obs)
    log_std = np.clip(_layers_from_layout(w)[3], LOG_STD_MIN, LOG_STD_MAX)
    return mean, np.exp(log_std)


def sample_action(mean: np.ndarray, std: np.ndarray,
                  rng: np.random.Generator) -> np.ndarray:
    return mean + std * rng.standard_normal(mean.shape)


def log_prob(mean: np.ndarray, std: np.ndarray, action: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log density, summed over action dims (last axis)."""
    z = (action - mean) / std
    return (-0.5 * z * z - np.log(std) - 0.5 * LOG_2PI).sum(axis=-1)


def entropy(std: np.ndarray) -> np.ndarray:
    return (0.5 * (LOG_2PI + 1.0) + np.log(std)).sum(axis=-1)


def make_policy_fn(w: WeightVector, obs_mean=None, obs_var=None,
                   obs_clip: float = 10.0):
    """Closure for envs.rollout_episode; optionally applies frozen
    observation normalization (the statistics the policy trained under)."""
    hidden, mw, mb, log_std = _layers_from_layout(w)
    std = np.exp(np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX))
    if obs_mean is not None:
        obs_mean = np.asarray(obs_mean, dtype=np.float64)
        obs_scale = 1.0 / np.sqrt(np.asarray(obs_var, dtype=np.float64) + 1e-8)

    def policy_fn(obs, rng, deterministic):
        if obs_mean is not None:
            obs = np.clip((obs - obs_mean) * obs_scale, -obs_clip, obs_clip)
        h = obs
        for lw, lb in hidden:
            h = np.tanh(h @ lw + lb)
        mean = h @ mw + mb
        if deterministic:
            return mean
        return mean + std * rng.standard_normal(mean.shape)

    return policy_fn


def evaluate_return(w: WeightVector, env_id: str, episodes: int = 20,
                    seed: int = 0, deterministic: bool = True,
                    obs_mean=None, obs_var=None) -> float:
    """Mean undiscounted episodic return over episodes with seeds
    seed, seed+1, ..."""
    if episodes < 1:
        raise PolicyError("episodes must be >= 1")
    from .envs import rollout_episode
    policy_fn = make_policy_fn(w, obs_mean, obs_var)
    env = make_env(env_id)
    total = 0.0
    for i in range(episodes):
        ret, _ = rollout_episode(env, policy_fn, seed + i, deterministic)
        total += ret
    return total / episodes


# -- differentiable forward (used by the PPO update) -------------------------


def policy_leaves(tape: Tape, w: WeightVector) -> dict[str, Var]:
    """Register each policy tensor as a tape leaf."""
    return {name: tape.leaf(t.copy()) for name, t in unpack(w).items()}


def mean_logstd_var(leaves: dict[str, Var], obs: np.ndarray) -> tuple[Var, Var]:
    """(mean, clipped log_std) Vars for a batch of (already normalized) obs."""
    tape = next(iter(leaves.values())).tape
    h = tape.leaf(np.asarray(obs, dtype=np.float64), requires_grad=False)
    i = 0
    while f"l{i}.W" in leaves:
        h = vtanh(h @ leaves[f"l{i}.W"] + leaves[f"l{i}.b"])
        i += 1
    mean = h @ leaves["mean.W"] + leaves["mean.b"]
    log_std = numcore.vclip(leaves["log_std"], LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std


def log_prob_entropy_var(mean: Var, log_std: Var, actions: np.ndarray) -> tuple[Var, Var]:
    """Differentiable summed log density and entropy for an action batch."""
    tape = mean.tape
    a = tape.leaf(np.asarray(actions, dtype=np.float64), requires_grad=False)
    std = numcore.vexp(log_std)
    z = (a - mean) / std
    lp = (z * z * -0.5 - log_std - 0.5 * LOG_2PI).sum(axis=-1)
    act_dim = actions.shape[-1]
    ent = log_std.sum() + 0.5 * (LOG_2PI + 1.0) * act_dim
    return lp, ent
