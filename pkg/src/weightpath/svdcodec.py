"""Temporal SVD codec: fit a truncated basis on a corpus of stacked weight
snapshots, encode weights to d-dim codes, decode codes back to weights.

encode(w) = w @ V_d / sigma_d (the U-row coordinates of the corpus SVD);
decode(u) = (u * sigma_d) @ V_d.T. decode(encode(.)) is the orthogonal
projection onto span(V_d).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .numcore import thin_svd


class CodecError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SvdBasis:
    sigma_d: np.ndarray       # (d,) descending positive
    v_d: np.ndarray           # (weight_dim, d), orthonormal columns
    d: int
    energy: np.ndarray        # cumulative energy fraction per rank (full spectrum)
    corpus_hash: str
    code_mean: np.ndarray     # (d,) token standardization stats
    code_std: np.ndarray      # (d,)
    layout: list | None = None  # weight layout carried from corpus metadata

    @property
    def weight_dim(self) -> int:
        return self.v_d.shape[0]


def numerical_rank(sigma: np.ndarray, shape: tuple[int, int]) -> int:
    if sigma[0] == 0.0:
        return 0
    tol = max(shape) * np.finfo(np.float64).eps * sigma[0]
    return int(np.sum(sigma > tol))


def fit_basis(corpus: np.ndarray, d: int, layout=None,
              subsample_above: int = 50_000) -> SvdBasis:
    """Thin SVD of the (n_snapshots x weight_dim) corpus, truncated to d.

    Corpora larger than `subsample_above` rows are fitted on a uniform
    row subsample (every k-th row); the standardization statistics are
    still computed over all rows.
    """
    corpus = np.asarray(corpus, dtype=np.float64)
    if corpus.ndim != 2:
        raise CodecError("corpus must be a 2-D matrix of stacked weight rows")
    if not np.all(np.isfinite(corpus)):
        raise CodecError("corpus contains non-finite entries")
    if d < 1 or corpus.shape[0] < d:
        raise CodecError(f"need corpus rows >= d >= 1, got rows={corpus.shape[0]}, d={d}")
    fit_rows = corpus
    if corpus.shape[0] > subsample_above:
        k = int(np.ceil(corpus.shape[0] / subsample_above))
        fit_rows = corpus[::k]
    _, sigma, v = thin_svd(fit_rows)
    rank = numerical_rank(sigma, fit_rows.shape)
    if d > rank:
        raise CodecError(f"requested d={d} exceeds attainable rank {rank}")
    total = float(np.sum(sigma ** 2))
    energy = np.cumsum(sigma ** 2) / total
    sigma_d = sigma[:d].copy()
    v_d = v[:, :d].copy()
    codes = corpus @ v_d / sigma_d
    code_mean = codes.mean(axis=0)
    code_std = codes.std(axis=0)
    code_std = np.where(code_std < 1e-12, 1.0, code_std)
    corpus_hash = hashlib.sha256(np.ascontiguousarray(corpus).tobytes()).hexdigest()[:16]
    return SvdBasis(sigma_d, v_d, d, energy, corpus_hash, code_mean,
                    code_std, layout)


def encode(basis: SvdBasis, values: np.ndarray) -> np.ndarray:
    """Weight vector (or stacked rows) -> d-dim code(s)."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != basis.weight_dim:
        raise CodecError(f"weight dim {values.shape[-1]} != basis dim {basis.weight_dim}")
    return values @ basis.v_d / basis.sigma_d


def decode(basis: SvdBasis, u: np.ndarray) -> np.ndarray:
    """d-dim code(s) -> reconstructed weight vector(s)."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != basis.d:
        raise CodecError(f"code dim {u.shape[-1]} != basis rank {basis.d}")
    return (u * basis.sigma_d) @ basis.v_d.T


def standardize(basis: SvdBasis, u: np.ndarray) -> np.ndarray:
    return (u - basis.code_mean) / basis.code_std


def destandardize(basis: SvdBasis, z: np.ndarray) -> np.ndarray:
    return z * basis.code_std + basis.code_mean


def energy_profile(basis: SvdBasis) -> np.ndarray:
    """Cumulative sum(sigma_i^2) / sum(all sigma^2) per retained rank."""
    return basis.energy.copy()
