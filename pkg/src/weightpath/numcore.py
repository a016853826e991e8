"""Dense numerical kernel: matrices, thin SVD, tape-based reverse-mode
autodiff, and the Adam update shared by the PPO and transformer trainers.

Everything is float64. All functions are pure; Var graphs are built on an
explicit Tape whose creation order is the topological order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

SQRT2 = float(np.sqrt(2.0))
INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

# iteration cap for the LAPACK SVD driver (sweeps before giving up)
SVD_MAX_SWEEPS = 100


class NumError(ValueError):
    """Raised on contract violations in the numerical kernel."""


# ---------------------------------------------------------------------------
# matrices


def as_matrix(data) -> np.ndarray:
    """Validate and return a 2-D float64 matrix with all entries finite."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise NumError(f"expected 2-D matrix, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise NumError("matrix contains non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit dimension check.

    Summation order is fixed by the underlying BLAS kernel, so repeated
    calls on the same inputs are bit-identical within a process.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise NumError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def thin_svd(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD: m = U @ diag(sigma) @ V.T with k = min(rows, cols).

    Returns (U, sigma, V) where sigma is descending and nonnegative and
    U, V have orthonormal columns.
    """
    m = as_matrix(m)
    if min(m.shape) < 1:
        raise NumError("thin_svd needs at least one row and one column")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumError(
            f"SVD did not converge within {SVD_MAX_SWEEPS} sweeps: {exc}"
        ) from exc
    return u, s, vt.T


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(n: int, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              lr: float | None = None) -> tuple[np.ndarray, AdamState]:
    """One Adam update with bias correction. Functional: returns new state.

    `lr` overrides the state's learning rate for this step (lr schedules).
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise NumError(f"adam_step shape mismatch: {params.shape} vs {grads.shape}")
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise NumError(f"non-finite gradient at index {int(bad[0])}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    mhat = m / (1.0 - state.beta1 ** t)
    vhat = v / (1.0 - state.beta2 ** t)
    step_lr = state.lr if lr is None else lr
    new_params = params - step_lr * mhat / (np.sqrt(vhat) + state.eps)
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return new_params, new_state


def clip_grad_norm(grads: np.ndarray, max_norm: float) -> np.ndarray:
    """Scale a flat gradient vector so its L2 norm is at most max_norm."""
    norm = float(np.linalg.norm(grads))
    if norm > max_norm and norm > 0.0:
        return grads * (max_norm / norm)
    return grads


# ---------------------------------------------------------------------------
# reverse-mode autodiff on ndarray-valued nodes


class Tape:
    """Records Var nodes in creation order (which is topological order)."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Var] = []

    def leaf(self, value, requires_grad: bool = True) -> "Var":
        v = np.asarray(value, dtype=np.float64)
        return Var(self, v, (), (), requires_grad)


class Var:
    __slots__ = ("tape", "value", "parents", "vjps", "requires_grad")

    def __init__(self, tape: Tape, value: np.ndarray, parents, vjps,
                 requires_grad: bool):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.requires_grad = requires_grad
        tape.nodes.append(self)

    # -- helpers ----------------------------------------------------------

    def _coerce(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return Var(self.tape, np.asarray(other, dtype=np.float64), (), (), False)

    @property
    def shape(self):
        return self.value.shape

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        o = self._coerce(other)
        return _make(self.tape, self.value + o.value, (self, o),
                     (lambda g: _unbroadcast(g, self.value.shape),
                      lambda g: _unbroadcast(g, o.value.shape)))

    __radd__ = __add__

    def __neg__(self):
        return _make(self.tape, -self.value, (self,), (lambda g: -g,))

    def __sub__(self, other):
        o = self._coerce(other)
        return _make(self.tape, self.value - o.value, (self, o),
                     (lambda g: _unbroadcast(g, self.value.shape),
                      lambda g: _unbroadcast(-g, o.value.shape)))

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        o = self._coerce(other)
        return _make(self.tape, self.value * o.value, (self, o),
                     (lambda g: _unbroadcast(g * o.value, self.value.shape),
                      lambda g: _unbroadcast(g * self.value, o.value.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._coerce(other)
        inv = 1.0 / o.value
        return _make(self.tape, self.value * inv, (self, o),
                     (lambda g: _unbroadcast(g * inv, self.value.shape),
                      lambda g: _unbroadcast(-g * self.value * inv * inv,
                                             o.value.shape)))

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __pow__(self, p: float):
        y = self.value ** p
        return _make(self.tape, y, (self,),
                     (lambda g: g * p * self.value ** (p - 1.0),))

    def __matmul__(self, other):
        return vmatmul(self, other)

    def __getitem__(self, idx):
        def bw(g):
            out = np.zeros_like(self.value)
            np.add.at(out, idx, g)
            return out
        return _make(self.tape, self.value[idx], (self,), (bw,))

    # -- shape ops ---------------------------------------------------------

    def reshape(self, *shape):
        old = self.value.shape
        return _make(self.tape, self.value.reshape(*shape), (self,),
                     (lambda g: g.reshape(old),))

    def swapaxes(self, a, b):
        return _make(self.tape, np.swapaxes(self.value, a, b), (self,),
                     (lambda g: np.swapaxes(g, a, b),))

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        def bw(g):
            if axis is None:
                return np.broadcast_to(g, self.value.shape).copy()
            gg = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(gg, self.value.shape).copy()
        return _make(self.tape, self.value.sum(axis=axis, keepdims=keepdims),
                     (self,), (bw,))

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _make(tape: Tape, value: np.ndarray, parents, vjps) -> Var:
    req = any(p.requires_grad for p in parents)
    return Var(tape, value, parents if req else (),
               vjps if req else (), req)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise functions --------------------------------------------------


def vtanh(x: Var) -> Var:
    y = np.tanh(x.value)
    return _make(x.tape, y, (x,), (lambda g: g * (1.0 - y * y),))


def vexp(x: Var) -> Var:
    y = np.exp(x.value)
    return _make(x.tape, y, (x,), (lambda g: g * y,))


def vlog(x: Var) -> Var:
    return _make(x.tape, np.log(x.value), (x,), (lambda g: g / x.value,))


def vgelu(x: Var) -> Var:
    """Exact (erf-based) GELU."""
    xv = x.value
    cdf = 0.5 * (1.0 + erf(xv / SQRT2))
    pdf = INV_SQRT_2PI * np.exp(-0.5 * xv * xv)
    return _make(x.tape, xv * cdf, (x,), (lambda g: g * (cdf + xv * pdf),))


def vclip(x: Var, lo: float, hi: float) -> Var:
    inside = (x.value >= lo) & (x.value <= hi)
    return _make(x.tape, np.clip(x.value, lo, hi), (x,),
                 (lambda g: g * inside,))


def vminimum(a: Var, b: Var) -> Var:
    take_a = a.value <= b.value
    return _make(a.tape, np.minimum(a.value, b.value), (a, b),
                 (lambda g: _unbroadcast(g * take_a, a.value.shape),
                  lambda g: _unbroadcast(g * ~take_a, b.value.shape)))


def vwhere(cond: np.ndarray, a: Var, b: Var) -> Var:
    return _make(a.tape, np.where(cond, a.value, b.value), (a, b),
                 (lambda g: _unbroadcast(g * cond, a.value.shape),
                  lambda g: _unbroadcast(g * ~cond, b.value.shape)))


def vmatmul(a: Var, b) -> Var:
    b = a._coerce(b)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[-2]:
        raise NumError(f"matmul dimension mismatch: {av.shape} x {bv.shape}")
    y = av @ bv

    def bwa(g):
        return _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)

    def bwb(g):
        return _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)

    return _make(a.tape, y, (a, b), (bwa, bwb))


def vsoftmax(x: Var) -> Var:
    """Softmax over the last axis (fused backward)."""
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return y * (g - (g * y).sum(axis=-1, keepdims=True))

    return _make(x.tape, y, (x,), (bw,))


def vlayernorm(x: Var, gain: Var, bias: Var, eps: float = 1e-5) -> Var:
    """Layer normalization over the last axis (fused backward)."""
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.value + bias.value
    n = xv.shape[-1]
    lead = tuple(range(xv.ndim - 1))

    def bwx(g):
        dxhat = g * gain.value
        return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                      - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / n)

    def bwg(g):
        return (g * xhat).sum(axis=lead)

    def bwb(g):
        return g.sum(axis=lead)

    return _make(x.tape, y, (x, gain, bias), (bwx, bwg, bwb))


def vdropout(x: Var, p: float, rng: np.random.Generator) -> Var:
    """Inverted dropout with a seed-determined mask."""
    if p <= 0.0:
        return x
    mask = (rng.random(x.value.shape) >= p) / (1.0 - p)
    return _make(x.tape, x.value * mask, (x,), (lambda g: g * mask,))


def backward(tape: Tape, output: Var) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar output.

    Returns gradients for every requires_grad leaf, keyed by id(leaf).
    """
    if output.value.size != 1:
        raise NumError(f"backward requires a scalar output, got shape {output.value.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if not node.parents:
            leaf_grads[id(node)] = leaf_grads.get(id(node), 0.0) + g
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            if not parent.requires_grad:
                continue
            pg = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaf_grads


def grad_of(leaf_grads: dict[int, np.ndarray], leaf: Var) -> np.ndarray:
    """Gradient for a specific leaf (zeros if it never influenced the output)."""
    g = leaf_grads.get(id(leaf))
    if g is None:
        return np.zeros_like(leaf.value)
    return np.broadcast_to(np.asarray(g, dtype=np.float64), leaf.value.shape)
