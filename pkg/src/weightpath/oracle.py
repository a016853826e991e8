"""Synthetic weight trajectories with known dynamics: gradient descent on
random SPD quadratics, with a closed form for the noiseless path.

Used to verify the codec + transformer stack end to end where RL training
offers no ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class OracleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class QuadraticSystem:
    a: np.ndarray           # (n, n) SPD
    b: np.ndarray           # (n,)
    alpha: float
    sigma_noise: float
    eigvals: np.ndarray     # spectrum of a (ascending)
    eigvecs: np.ndarray     # orthonormal columns

    @property
    def n(self) -> int:
        return self.b.shape[0]

    @property
    def minimum(self) -> np.ndarray:
        """A^-1 b via the eigendecomposition."""
        return self.eigvecs @ ((self.eigvecs.T @ self.b) / self.eigvals)

    def objective(self, phi: np.ndarray) -> float:
        return float(0.5 * phi @ self.a @ phi - self.b @ phi)


def make_system(n: int, seed: int, lambda_min: float = 0.1,
                lambda_max: float = 1.0, alpha: float = 0.5,
                sigma_noise: float = 0.0) -> QuadraticSystem:
    """A = Q diag(lambda) Q^T with random orthogonal Q, lambda uniform in
    [lambda_min, lambda_max], b standard normal."""
    if not (0.0 < lambda_min <= lambda_max):
        raise OracleError("need 0 < lambda_min <= lambda_max")
    if alpha * lambda_max >= 2.0:
        raise OracleError(
            f"contraction violated: alpha*lambda_max = {alpha * lambda_max} >= 2")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0AC1E]))
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.sort(rng.uniform(lambda_min, lambda_max, size=n))
    a = (q * lam) @ q.T
    a = 0.5 * (a + a.T)  # exact symmetry
    b = rng.standard_normal(n)
    return QuadraticSystem(a, b, alpha, sigma_noise, lam, q)


def gen_trajectory(sys: QuadraticSystem, phi0: np.ndarray, steps: int,
                   seed: int = 0) -> np.ndarray:
    """phi_{t+1} = phi_t - alpha (A phi_t - b) + sigma eps_t.

    Returns (steps+1, n) starting at phi0; noise is seed-determined.
    """
    phi0 = np.asarray(phi0, dtype=np.float64)
    if phi0.shape != (sys.n,):
        raise OracleError(f"phi0 must have shape ({sys.n},)")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6E0]))
    out = np.empty((steps + 1, sys.n))
    out[0] = phi0
    phi = phi0
    for t in range(steps):
        phi = phi - sys.alpha * (sys.a @ phi - sys.b)
        if sys.sigma_noise > 0.0:
            phi = phi + sys.sigma_noise * rng.standard_normal(sys.n)
        out[t + 1] = phi
    return out


def closed_form(sys: QuadraticSystem, phi0: np.ndarray, t: int) -> np.ndarray:
    """Noiseless iterate: phi_t = A^-1 b + (I - alpha A)^t (phi0 - A^-1 b),
    evaluated through the eigendecomposition."""
    phi0 = np.asarray(phi0, dtype=np.float64)
    star = sys.minimum
    coeffs = sys.eigvecs.T @ (phi0 - star)
    return star + sys.eigvecs @ ((1.0 - sys.alpha * sys.eigvals) ** t * coeffs)
