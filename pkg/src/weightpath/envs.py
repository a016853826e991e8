"""Self-contained continuous-control tasks used to generate policy weight
trajectories: a continuous-force cart-pole and a damped 2-D point mass.

Both are deterministic given (seed, action sequence). An instance is
single-owner; run one per worker.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    id: str
    obs_dim: int
    act_dim: int
    act_low: np.ndarray
    act_high: np.ndarray
    horizon: int


@dataclass(frozen=True)
class StepResult:
    next_obs: np.ndarray
    reward: float
    done: bool
    truncated: bool


class CartPoleContinuous:
    """Cart-pole balancing with a continuous 1-D force input.

    Force is 3.0 * action (action clipped to [-1, 1]); reward +1 per step;
    terminates when |theta| > 0.2 rad or |x| > 2.4; truncates at 500 steps.
    Explicit Euler at dt = 0.02.
    """

    GRAVITY = 9.8
    MASS_CART = 1.0
    MASS_POLE = 0.1
    TOTAL_MASS = MASS_CART + MASS_POLE
    POLE_HALF_LEN = 0.5
    FORCE_SCALE = 3.0
    DT = 0.02
    THETA_LIMIT = 0.2
    X_LIMIT = 2.4

    spec = EnvSpec("cartpole", 4, 1, np.array([-1.0]), np.array([1.0]), 500)

    def __init__(self):
        self._state = None
        self._steps = 0
        self._finished = True

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self._state = rng.uniform(-0.01, 0.01, size=4)
        self._steps = 0
        self._finished = False
        return self._state.copy()

    def step(self, action) -> StepResult:
        if self._finished:
            raise EnvError("step() called on a finished episode; reset first")
        a = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0],
                          -1.0, 1.0))
        force = self.FORCE_SCALE * a
        x, x_dot, theta, theta_dot = self._state
        sin_t = np.sin(theta)
        cos_t = np.cos(theta)
        mp, l, big_m = self.MASS_POLE, self.POLE_HALF_LEN, self.TOTAL_MASS
        theta_acc = (self.GRAVITY * sin_t
                     - cos_t * (force + mp * l * theta_dot ** 2 * sin_t) / big_m) \
            / (l * (4.0 / 3.0 - mp * cos_t ** 2 / big_m))
        x_acc = (force + mp * l * (theta_dot ** 2 * sin_t - theta_acc * cos_t)) / big_m
        dt = self.DT
        x = x + dt * x_dot
        x_dot = x_dot + dt * x_acc
        theta = theta + dt * theta_dot
        theta_dot = theta_dot + dt * theta_acc
        self._state = np.array([x, x_dot, theta, theta_dot])
        self._steps += 1
        done = bool(abs(theta) > self.THETA_LIMIT or abs(x) > self.X_LIMIT)
        truncated = bool(not done and self._steps >= self.spec.horizon)
        self._finished = done or truncated
        return StepResult(self._state.copy(), 1.0, done, truncated)


class PointMass2D:
    """Damped point mass steered toward the origin.

    v' = 0.95 v + 0.05 a, p' = p + 0.05 v'; reward -|p| - 0.01 |a|^2;
    truncates at 100 steps, never terminates early.
    """

    spec = EnvSpec("pointmass", 4, 2, np.array([-1.0, -1.0]),
                   np.array([1.0, 1.0]), 100)

    def __init__(self):
        self._pos = None
        self._vel = None
        self._steps = 0
        self._finished = True

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self._pos = rng.uniform(-1.0, 1.0, size=2)
        self._vel = np.zeros(2)
        self._steps = 0
        self._finished = False
        return np.concatenate([self._pos, self._vel])

    def step(self, action) -> StepResult:
        if self._finished:
            raise EnvError("step() called on a finished episode; reset first")
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(-1), -1.0, 1.0)
        if a.shape != (2,):
            raise EnvError(f"pointmass action must have 2 components, got {a.shape}")
        self._vel = 0.95 * self._vel + 0.05 * a
        self._pos = self._pos + 0.05 * self._vel
        self._steps += 1
        reward = float(-np.linalg.norm(self._pos) - 0.01 * np.dot(a, a))
        truncated = self._steps >= self.spec.horizon
        self._finished = truncated
        return StepResult(np.concatenate([self._pos, self._vel]), reward,
                          False, truncated)


ENV_REGISTRY = {
    "cartpole": CartPoleContinuous,
    "pointmass": PointMass2D,
}


def make_env(env_id: str):
    try:
        return ENV_REGISTRY[env_id]()
    except KeyError:
        raise EnvError(f"unknown env id {env_id!r}; known: {sorted(ENV_REGISTRY)}")


def rollout_episode(env, policy_fn, seed: int,
                    deterministic: bool = True) -> tuple[float, int]:
    """Run one episode, summing undiscounted rewards.

    policy_fn(obs, rng, deterministic) -> action. The rng is per-episode,
    seeded from `seed`, so stochastic policies are reproducible.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    obs = env.reset(seed)
    total = 0.0
    length = 0
    while True:
        action = policy_fn(obs, rng, deterministic)
        res = env.step(action)
        total += res.reward
        length += 1
        if res.done or res.truncated:
            return total, length
        obs = res.next_obs
