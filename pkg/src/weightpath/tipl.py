"""Causal transformer over SVD-coded weight tokens, trained to predict the
next code from the history (autoregressive MSE).

GPT-style pre-norm blocks: token embedding + learned positional embeddings,
causal multi-head self-attention, GELU feed-forward, linear output head.
Codes are standardized (per basis statistics) before entering the model.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np

from . import numcore, svdcodec
from .numcore import (Tape, Var, backward, grad_of, vdropout, vgelu,
                      vlayernorm, vsoftmax)


class TiplError(RuntimeError):
    pass


@dataclass(frozen=True)
class TiplConfig:
    d_token: int
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

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise TiplError("embed_dim must be divisible by heads")
        if self.context_len < 2:
            raise TiplError("context_len must be >= 2")


@dataclass(eq=False)
class TiplModel:
    config: TiplConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())


def _param_shapes(cfg: TiplConfig) -> list[tuple[str, tuple[int, ...]]]:
    e, d, k = cfg.embed_dim, cfg.d_token, cfg.context_len
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("tok.w", (d, e)), ("tok.b", (e,)), ("pos", (k, e)),
    ]
    for i in range(cfg.layers):
        p = f"L{i}."
        shapes += [
            (p + "ln1.g", (e,)), (p + "ln1.b", (e,)),
            (p + "attn.wq", (e, e)), (p + "attn.bq", (e,)),
            (p + "attn.wk", (e, e)), (p + "attn.bk", (e,)),
            (p + "attn.wv", (e, e)), (p + "attn.bv", (e,)),
            (p + "attn.wo", (e, e)), (p + "attn.bo", (e,)),
            (p + "ln2.g", (e,)), (p + "ln2.b", (e,)),
            (p + "ff.w1", (e, 4 * e)), (p + "ff.b1", (4 * e,)),
            (p + "ff.w2", (4 * e, e)), (p + "ff.b2", (e,)),
        ]
    shapes += [("lnf.g", (e,)), ("lnf.b", (e,)),
               ("head.w", (e, d)), ("head.b", (d,))]
    return shapes


def init_model(cfg: TiplConfig, seed: int) -> TiplModel:
    """normal(0, 0.02) weights and embeddings, zero biases, unit LN gains."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7199]))
    params = {}
    for name, shape in _param_shapes(cfg):
        if name.endswith(".b") or name == "lnf.b":
            params[name] = np.zeros(shape)
        elif name.endswith("ln1.g") or name.endswith("ln2.g") or name == "lnf.g":
            params[name] = np.ones(shape)
        else:
            params[name] = 0.02 * rng.standard_normal(shape)
    return TiplModel(cfg, params)


def _causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), -1e30), k=1)


def _forward_var(leaves: dict[str, Var], cfg: TiplConfig, x: np.ndarray,
                 train_mode: bool, rng: np.random.Generator | None,
                 key_pad: np.ndarray | None = None) -> Var:
    """Batched forward. x: (B, T, d_token) -> (B, T, d_token) predictions.

    key_pad: optional (B, T) bool, True where the token is left-padding;
    padded keys are masked out of attention.
    """
    b, t, _ = x.shape
    if t > cfg.context_len:
        raise TiplError(f"segment length {t} exceeds context_len {cfg.context_len}")
    tape = next(iter(leaves.values())).tape
    e, h = cfg.embed_dim, cfg.heads
    hd = e // h
    drop = cfg.dropout if train_mode else 0.0
    mask = _causal_mask(t)[None, None]  # (1,1,T,T)
    if key_pad is not None and key_pad.any():
        mask = mask + np.where(key_pad, -1e30, 0.0)[:, None, None, :]
    xin = tape.leaf(x, requires_grad=False)
    hid = xin @ leaves["tok.w"] + leaves["tok.b"] + leaves["pos"][:t]
    if drop > 0.0:
        hid = vdropout(hid, drop, rng)
    scale = 1.0 / np.sqrt(hd)
    for i in range(cfg.layers):
        p = f"L{i}."
        a = vlayernorm(hid, leaves[p + "ln1.g"], leaves[p + "ln1.b"])

        def split_heads(v: Var) -> Var:
            return v.reshape(b, t, h, hd).swapaxes(1, 2)  # (B,H,T,hd)

        q = split_heads(a @ leaves[p + "attn.wq"] + leaves[p + "attn.bq"])
        k = split_heads(a @ leaves[p + "attn.wk"] + leaves[p + "attn.bk"])
        v = split_heads(a @ leaves[p + "attn.wv"] + leaves[p + "attn.bv"])
        scores = (q @ k.swapaxes(-1, -2)) * scale + mask
        attn = vsoftmax(scores)
        if drop > 0.0:
            attn = vdropout(attn, drop, rng)
        y = (attn @ v).swapaxes(1, 2).reshape(b, t, e)
        y = y @ leaves[p + "attn.wo"] + leaves[p + "attn.bo"]
        if drop > 0.0:
            y = vdropout(y, drop, rng)
        hid = hid + y
        f = vlayernorm(hid, leaves[p + "ln2.g"], leaves[p + "ln2.b"])
        f = vgelu(f @ leaves[p + "ff.w1"] + leaves[p + "ff.b1"])
        f = f @ leaves[p + "ff.w2"] + leaves[p + "ff.b2"]
        if drop > 0.0:
            f = vdropout(f, drop, rng)
        hid = hid + f
    hid = vlayernorm(hid, leaves["lnf.g"], leaves["lnf.b"])
    return hid @ leaves["head.w"] + leaves["head.b"]


def _leaves(tape: Tape, model: TiplModel) -> dict[str, Var]:
    return {name: tape.leaf(p) for name, p in model.params.items()}


def forward(model: TiplModel, segment: np.ndarray, train_mode: bool = False,
            seed: int = 0) -> np.ndarray:
    """Predictions for one segment (T, d_token) -> (T, d_token).

    Output at position t is the predicted code for position t+1.
    Deterministic when train_mode is False (dropout off).
    """
    segment = np.asarray(segment, dtype=np.float64)
    if segment.ndim != 2 or segment.shape[1] != model.config.d_token:
        raise TiplError(f"segment must be (T, {model.config.d_token})")
    tape = Tape()
    leaves = {name: tape.leaf(p, requires_grad=False)
              for name, p in model.params.items()}
    rng = np.random.default_rng(seed) if train_mode else None
    out = _forward_var(leaves, model.config, segment[None], train_mode, rng)
    return out.value[0]


# -- training -----------------------------------------------------------------


def sample_segments(trajs: list[np.ndarray], cfg: TiplConfig,
                    rng: np.random.Generator):
    """64-style segment batch: uniform trajectory, uniform valid start,
    left-padded to context_len with a pad mask."""
    k, d, bsz = cfg.context_len, cfg.d_token, cfg.batch_size
    inputs = np.zeros((bsz, k, d))
    targets = np.zeros((bsz, k, d))
    pad = np.ones((bsz, k), dtype=bool)
    for i in range(bsz):
        traj = trajs[int(rng.integers(len(trajs)))]
        t_len = traj.shape[0]
        s = int(rng.integers(0, t_len - 1))
        seg = min(k, t_len - 1 - s)
        inputs[i, k - seg:] = traj[s:s + seg]
        targets[i, k - seg:] = traj[s + 1:s + 1 + seg]
        pad[i, k - seg:] = False
    return inputs, targets, pad


def _flatten_index(params: dict[str, np.ndarray]):
    index = []
    off = 0
    for name, p in params.items():
        index.append((name, p.shape, off))
        off += p.size
    return index, off


def train(model: TiplModel, trajs: list[np.ndarray], seed: int = 0,
          log_every: int = 0) -> tuple[TiplModel, list[float]]:
    """Autoregressive MSE training over random trajectory segments.

    trajs: standardized code arrays, each (T_i, d_token) with T_i >= 2.
    Adam with linear warmup then constant lr, decoupled weight decay on
    matrices, global gradient clip. Returns per-iteration mean loss.
    """
    cfg = model.config
    for j, tr in enumerate(trajs):
        if tr.shape[0] < 2:
            raise TiplError(f"trajectory {j} has fewer than 2 snapshots")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E6]))
    params = {name: p.copy() for name, p in model.params.items()}
    index, total = _flatten_index(params)
    decay_mask = np.zeros(total)
    for name, shape, off in index:
        if len(shape) == 2 and name != "pos":
            decay_mask[off:off + int(np.prod(shape))] = 1.0
    flat = np.concatenate([params[name].reshape(-1) for name, _, _ in index])
    opt = numcore.adam_init(total, lr=cfg.lr)
    history = []
    step = 0
    for it in range(cfg.iters):
        losses = np.empty(cfg.batches_per_iter)
        for bi in range(cfg.batches_per_iter):
            inputs, targets, pad = sample_segments(trajs, cfg, rng)
            tape = Tape()
            leaves = {}
            for name, shape, off in index:
                leaves[name] = tape.leaf(
                    flat[off:off + int(np.prod(shape))].reshape(shape))
            preds = _forward_var(leaves, cfg, inputs, True, rng, key_pad=pad)
            tgt = tape.leaf(targets, requires_grad=False)
            w = (~pad).astype(np.float64)[:, :, None]
            err = (preds - tgt) * w
            denom = float(w.sum()) * cfg.d_token
            loss = (err * err).sum() * (1.0 / denom)
            lval = float(loss.value)
            if not np.isfinite(lval):
                raise TiplError(f"non-finite loss at iteration {it}, batch {bi}")
            grads = backward(tape, loss)
            flat_g = np.empty(total)
            for name, shape, off in index:
                flat_g[off:off + int(np.prod(shape))] = \
                    grad_of(grads, leaves[name]).reshape(-1)
            flat_g = numcore.clip_grad_norm(flat_g, cfg.grad_clip)
            lr = cfg.lr * min(1.0, (step + 1) / max(1, cfg.warmup_steps))
            flat, opt = numcore.adam_step(flat, flat_g, opt, lr=lr)
            if cfg.weight_decay > 0.0:
                flat = flat - lr * cfg.weight_decay * decay_mask * flat
            losses[bi] = lval
            step += 1
        history.append(float(losses.mean()))
        if log_every and (it + 1) % log_every == 0:
            print(f"[tipl] iter {it + 1}/{cfg.iters} loss {history[-1]:.6g}")
    out_params = {name: flat[off:off + int(np.prod(shape))].reshape(shape).copy()
                  for name, shape, off in index}
    return TiplModel(cfg, out_params), history


# -- autoregressive rollout ---------------------------------------------------


def predict_next(model: TiplModel, window: np.ndarray) -> np.ndarray:
    """Next standardized code given a (T<=K, d_token) standardized window."""
    return forward(model, window)[-1]


def rollout(model: TiplModel, basis: svdcodec.SvdBasis,
            prefix_weights: np.ndarray, k: int) -> np.ndarray:
    """Predict k future weight vectors from true prefix weights.

    prefix_weights: (P, weight_dim) rows. Encodes + standardizes the
    prefix, autoregressively feeds predictions back with a sliding window
    of width context_len, then de-standardizes and decodes each prediction.
    Returns (k, weight_dim).
    """
    prefix_weights = np.atleast_2d(np.asarray(prefix_weights, dtype=np.float64))
    if prefix_weights.shape[0] < 1 or k < 0:
        raise TiplError("need at least one prefix weight and k >= 0")
    if basis.d != model.config.d_token:
        raise TiplError(f"basis rank {basis.d} != model d_token {model.config.d_token}")
    codes = svdcodec.standardize(basis, svdcodec.encode(basis, prefix_weights))
    window = list(codes[-model.config.context_len:])
    preds = []
    for _ in range(k):
        nxt = predict_next(model, np.asarray(window))
        preds.append(nxt)
        window.append(nxt)
        if len(window) > model.config.context_len:
            window.pop(0)
    if not preds:
        return np.zeros((0, basis.weight_dim))
    z = np.asarray(preds)
    return svdcodec.decode(basis, svdcodec.destandardize(basis, z))


# -- checkpoint helpers (binary format lives in fileio) ------------------------


def config_dict(cfg: TiplConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> TiplConfig:
    return TiplConfig(**d)
