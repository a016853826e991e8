"""Bit-exact binary formats for trajectories, SVD bases, and transformer
checkpoints.

Common scheme: 6-byte magic, u32 LE format version, u64 LE metadata length
followed by UTF-8 JSON, then a little-endian float64 payload. All writes
are whole-file atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .policy import Layout
from .ppo import WeightTrajectory
from .svdcodec import SvdBasis
from .tipl import TiplModel, config_from_dict, config_dict

TRAJ_MAGIC = b"WTRJ1\n"
BASIS_MAGIC = b"WSVD1\n"
CKPT_MAGIC = b"TIPL1\n"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def _atomic_write(path, blob: bytes):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _header(magic: bytes, meta: dict) -> bytes:
    mb = json.dumps(meta, sort_keys=True).encode("utf-8")
    return magic + struct.pack("<I", FORMAT_VERSION) + struct.pack("<Q", len(mb)) + mb


def _read_header(blob: bytes, magic: bytes, kind: str):
    if blob[:6] != magic:
        raise FormatError(f"not a {kind} file (bad magic {blob[:6]!r})")
    (version,) = struct.unpack_from("<I", blob, 6)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported {kind} format version {version} "
                          f"(supported: {FORMAT_VERSION})")
    (mlen,) = struct.unpack_from("<Q", blob, 10)
    meta_end = 18 + mlen
    if len(blob) < meta_end:
        raise FormatError(f"truncated {kind} metadata: expected {meta_end} "
                          f"bytes, got {len(blob)}")
    meta = json.loads(blob[18:meta_end].decode("utf-8"))
    return meta, meta_end


def _layout_to_json(layout: Layout):
    return [[name, list(shape), offset] for name, shape, offset in layout]


def _layout_from_json(j) -> Layout:
    return [(name, tuple(shape), offset) for name, shape, offset in j]


# -- trajectories -------------------------------------------------------------


def save_trajectory(traj: WeightTrajectory, path):
    meta = dict(traj.meta)
    meta["layout"] = _layout_to_json(traj.layout)
    if traj.returns is not None:
        meta["returns"] = [None if not np.isfinite(r) else float(r)
                           for r in traj.returns]
    n, dim = traj.snapshots.shape
    payload = struct.pack("<QQ", n, dim) + \
        np.ascontiguousarray(traj.snapshots, dtype="<f8").tobytes()
    _atomic_write(path, _header(TRAJ_MAGIC, meta) + payload)


def load_trajectory(path) -> WeightTrajectory:
    with open(path, "rb") as f:
        blob = f.read()
    meta, off = _read_header(blob, TRAJ_MAGIC, "trajectory")
    if len(blob) < off + 16:
        raise FormatError(f"truncated trajectory payload header: expected "
                          f"{off + 16} bytes, got {len(blob)}")
    n, dim = struct.unpack_from("<QQ", blob, off)
    expected = off + 16 + 8 * n * dim
    if len(blob) != expected:
        raise FormatError(f"truncated trajectory payload: expected "
                          f"{expected} bytes, got {len(blob)}")
    snaps = np.frombuffer(blob, dtype="<f8", count=n * dim,
                          offset=off + 16).reshape(n, dim).copy()
    layout = _layout_from_json(meta.pop("layout"))
    returns_list = meta.pop("returns", None)
    returns = None
    if returns_list is not None:
        returns = np.array([np.nan if r is None else r for r in returns_list])
    return WeightTrajectory(snaps, layout, meta, returns)


# -- SVD bases ----------------------------------------------------------------


def save_basis(basis: SvdBasis, path):
    meta = {
        "d": basis.d,
        "sigma": basis.sigma_d.tolist(),
        "energy": basis.energy.tolist(),
        "corpus_hash": basis.corpus_hash,
        "code_mean": basis.code_mean.tolist(),
        "code_std": basis.code_std.tolist(),
        "layout": _layout_to_json(basis.layout) if basis.layout else None,
    }
    rows, cols = basis.v_d.shape
    payload = struct.pack("<QQ", rows, cols) + \
        np.ascontiguousarray(basis.v_d, dtype="<f8").tobytes()
    _atomic_write(path, _header(BASIS_MAGIC, meta) + payload)


def load_basis(path) -> SvdBasis:
    with open(path, "rb") as f:
        blob = f.read()
    meta, off = _read_header(blob, BASIS_MAGIC, "basis")
    if len(blob) < off + 16:
        raise FormatError(f"truncated basis payload header: expected "
                          f"{off + 16} bytes, got {len(blob)}")
    rows, cols = struct.unpack_from("<QQ", blob, off)
    expected = off + 16 + 8 * rows * cols
    if len(blob) != expected:
        raise FormatError(f"truncated basis payload: expected {expected} "
                          f"bytes, got {len(blob)}")
    v_d = np.frombuffer(blob, dtype="<f8", count=rows * cols,
                        offset=off + 16).reshape(rows, cols).copy()
    layout = _layout_from_json(meta["layout"]) if meta.get("layout") else None
    return SvdBasis(np.array(meta["sigma"]), v_d, meta["d"],
                    np.array(meta["energy"]), meta["corpus_hash"],
                    np.array(meta["code_mean"]), np.array(meta["code_std"]),
                    layout)


# -- transformer checkpoints ---------------------------------------------------


def save_checkpoint(model: TiplModel, path, extra_meta: dict | None = None):
    meta = {"config": config_dict(model.config)}
    if extra_meta:
        meta["extra"] = extra_meta
    parts = [struct.pack("<Q", len(model.params))]
    for name, p in model.params.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<Q", p.ndim))
        parts.append(struct.pack(f"<{p.ndim}Q", *p.shape))
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    _atomic_write(path, _header(CKPT_MAGIC, meta) + b"".join(parts))


def load_checkpoint(path) -> TiplModel:
    with open(path, "rb") as f:
        blob = f.read()
    meta, off = _read_header(blob, CKPT_MAGIC, "checkpoint")

    def need(n: int):
        if len(blob) < off + n:
            raise FormatError(f"truncated checkpoint payload: expected "
                              f"{off + n} bytes, got {len(blob)}")

    need(8)
    (n_tensors,) = struct.unpack_from("<Q", blob, off)
    off += 8
    params = {}
    for _ in range(n_tensors):
        need(8)
        (nlen,) = struct.unpack_from("<Q", blob, off)
        off += 8
        need(nlen + 8)
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<Q", blob, off)
        off += 8
        need(8 * ndim)
        shape = struct.unpack_from(f"<{ndim}Q", blob, off)
        off += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        need(8 * count)
        params[name] = np.frombuffer(blob, dtype="<f8", count=count,
                                     offset=off).reshape(shape).copy()
        off += 8 * count
    if off != len(blob):
        raise FormatError(f"checkpoint has {len(blob) - off} trailing bytes")
    return TiplModel(config_from_dict(meta["config"]), params)
