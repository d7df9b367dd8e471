"""Versioned binary checkpoints for training state.

Layout (all integers little-endian):

    magic            4 bytes  b"CINR"
    version          u32      currently 1
    config_len       u32      followed by that many bytes of canonical
                              JSON (sorted keys) for the run config
    config_sha256    32 bytes digest of the JSON bytes above
    fingerprint_len  u32      followed by the volume fingerprint (ascii)
    dims             3 x u64  voxel grid of the training volume
    spacing          3 x f64  voxel spacing of the training volume
    step             u64      optimizer step counter
    net_count        u32      then per network, in order:
        name_len u32 + name, head_len u32 + head,
        inject_layer i32 (-1 for none), inject_width u32,
        layer_count u32, then per layer the weight and bias arrays
    adam hyperparams f64 x4   beta1, beta2, eps, weight_decay
    adam_pairs       u32      then per trained array the m and v arrays
    record_count     u32      then per loss record:
        step u64, lr f64, signal f64, tv f64, lambda f64,
        n_signal_voxels u64

Each array is encoded as: dtype code u8 (0 = float32, 1 = float64),
ndim u8, each dim u64, then the raw C-order bytes.  The loss history
rides along so a resumed run can report a concatenated history.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import struct

import numpy as np

from .networks import MlpParams
from .optim import AdamState

MAGIC = b"CINR"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(RuntimeError):
    """Malformed, truncated, or incompatible checkpoint file."""


@dataclasses.dataclass(frozen=True)
class Checkpoint:
    """Deserialized training state."""

    config: dict
    config_hash: str
    fingerprint: str
    dims: tuple
    spacing: tuple
    step: int
    nets: dict
    opt: AdamState
    records: tuple


def config_bytes(config):
    """Canonical JSON encoding used for hashing and storage."""
    return json.dumps(config, sort_keys=True, separators=(",", ":")).encode()


def config_hash(config):
    return hashlib.sha256(config_bytes(config)).hexdigest()


def _write_array(f, a):
    a = np.ascontiguousarray(a)
    if a.dtype not in _CODE_FOR:
        raise CheckpointError(f"unsupported array dtype {a.dtype}")
    f.write(struct.pack("<BB", _CODE_FOR[a.dtype], a.ndim))
    f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    f.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_exact(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_array(f):
    code, ndim = struct.unpack("<BB", _read_exact(f, 2))
    if code not in _DTYPE_CODES:
        raise CheckpointError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim))
    dt = _DTYPE_CODES[code]
    n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    data = np.frombuffer(_read_exact(f, n * dt.itemsize), dtype=dt)
    return data.reshape(shape).astype(dt.newbyteorder("="), copy=True)


def _write_str(f, s):
    raw = s.encode()
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _read_str(f):
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n).decode()


def _write_net(f, name, params):
    _write_str(f, name)
    _write_str(f, params.head)
    inject = -1 if params.inject_layer is None else params.inject_layer
    f.write(struct.pack("<iI", inject, params.inject_width))
    f.write(struct.pack("<I", len(params.layers)))
    for w, b in params.layers:
        _write_array(f, w)
        _write_array(f, b)


def _read_net(f):
    name = _read_str(f)
    head = _read_str(f)
    inject, inject_width = struct.unpack("<iI", _read_exact(f, 8))
    (n_layers,) = struct.unpack("<I", _read_exact(f, 4))
    layers = [(_read_array(f), _read_array(f)) for _ in range(n_layers)]
    params = MlpParams(
        layers=layers,
        head=head,
        inject_layer=None if inject < 0 else inject,
        inject_width=inject_width,
    )
    params.validate()
    return name, params


def save_checkpoint(path, config, fingerprint, dims, spacing, step, nets, opt,
                    records=()):
    """Serialize the full training state to ``path``.

    ``nets`` maps name -> MlpParams; ``opt`` m/v lists must align with the
    caller's trainable-array ordering.  ``records`` are loss-history tuples
    ``(step, lr, signal, tv, lambda_tv, n_signal_voxels)``.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg_raw = config_bytes(config)
    buf.write(struct.pack("<I", len(cfg_raw)))
    buf.write(cfg_raw)
    buf.write(hashlib.sha256(cfg_raw).digest())
    _write_str(buf, fingerprint)
    if len(dims) != 3 or len(spacing) != 3:
        raise CheckpointError("dims and spacing must have three entries")
    buf.write(struct.pack("<3Q", *(int(n) for n in dims)))
    buf.write(struct.pack("<3d", *(float(s) for s in spacing)))
    buf.write(struct.pack("<Q", step))
    buf.write(struct.pack("<I", len(nets)))
    for name, params in nets.items():
        _write_net(buf, name, params)
    buf.write(struct.pack("<dddd", opt.beta1, opt.beta2, opt.eps, opt.weight_decay))
    buf.write(struct.pack("<I", len(opt.m)))
    for m, v in zip(opt.m, opt.v):
        _write_array(buf, m)
        _write_array(buf, v)
    buf.write(struct.pack("<I", len(records)))
    for rec in records:
        s, lr, signal, tv, lam, n_vox = rec
        buf.write(struct.pack("<QddddQ", int(s), lr, signal, tv, lam, int(n_vox)))
    with open(path, "wb") as f:
        f.write(buf.getvalue())
    return path


def load_checkpoint(path):
    """Parse ``path``; raises :class:`CheckpointError` on any defect."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(f, 4))
        cfg_raw = _read_exact(f, cfg_len)
        stored_digest = _read_exact(f, 32)
        if hashlib.sha256(cfg_raw).digest() != stored_digest:
            raise CheckpointError("config hash mismatch: file is corrupt")
        try:
            config = json.loads(cfg_raw.decode())
        except json.JSONDecodeError as e:
            raise CheckpointError(f"config block is not valid JSON: {e}") from e
        fingerprint = _read_str(f)
        dims = struct.unpack("<3Q", _read_exact(f, 24))
        spacing = struct.unpack("<3d", _read_exact(f, 24))
        (step,) = struct.unpack("<Q", _read_exact(f, 8))
        (net_count,) = struct.unpack("<I", _read_exact(f, 4))
        nets = {}
        for _ in range(net_count):
            name, params = _read_net(f)
            nets[name] = params
        beta1, beta2, eps, wd = struct.unpack("<dddd", _read_exact(f, 32))
        (pair_count,) = struct.unpack("<I", _read_exact(f, 4))
        m, v = [], []
        for _ in range(pair_count):
            m.append(_read_array(f))
            v.append(_read_array(f))
        opt = AdamState(m=m, v=v, step=step, beta1=beta1, beta2=beta2,
                        eps=eps, weight_decay=wd)
        (rec_count,) = struct.unpack("<I", _read_exact(f, 4))
        records = []
        for _ in range(rec_count):
            s, lr, signal, tv, lam, n_vox = struct.unpack(
                "<QddddQ", _read_exact(f, 48)
            )
            records.append((s, lr, signal, tv, lam, n_vox))
        trailing = f.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(
        config=config,
        config_hash=hashlib.sha256(cfg_raw).hexdigest(),
        fingerprint=fingerprint,
        dims=tuple(int(n) for n in dims),
        spacing=tuple(float(s) for s in spacing),
        step=step,
        nets=nets,
        opt=opt,
        records=tuple(records),
    )
