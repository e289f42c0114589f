"""Binary checkpoint format.

Layout (all integers and reals little-endian)::

    b"GDHZ"  u32 version
    u32 config_len, config JSON (UTF-8, sorted keys)
    u64 step, u64 seed
    u32 n_params, then per parameter:
        u16 name_len, name, u8 ndim, u32 dims[ndim], f32 data
    u64 adam_t, f64 beta1, f64 beta2, f64 eps
    u8 has_moments, then per parameter (same order): f32 m, f32 v

Parameters are written in registry order, so identical models produce
identical bytes.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import AdamState, Tensor
from .network import ConfigError, GridConfig, ModelParams, parameter_shapes

MAGIC = b"GDHZ"
VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed, from another version, or inconsistent with its config."""


@dataclass
class Checkpoint:
    params: ModelParams
    optimizer: AdamState
    config: GridConfig
    step: int = 0
    seed: int = 0


def _f32le(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def checkpoint_bytes(params: ModelParams, optimizer: AdamState | None = None, step: int = 0,
                     seed: int = 0) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = params.config.to_json().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<QQ", step, seed))
    buf.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.shape))
        buf.write(_f32le(t.data))
    opt = optimizer or AdamState()
    buf.write(struct.pack("<Qddd", opt.t, opt.beta1, opt.beta2, opt.eps))
    has_moments = all(name in opt.m for name in params)
    buf.write(struct.pack("<B", int(has_moments)))
    if has_moments:
        for name in params:
            buf.write(_f32le(opt.m[name]))
            buf.write(_f32le(opt.v[name]))
    return buf.getvalue()


def save_checkpoint(params: ModelParams, optimizer: AdamState | None, path, step: int = 0,
                    seed: int = 0) -> None:
    data = checkpoint_bytes(params, optimizer, step, seed)
    tmp = f"{path}.tmp{os.getpid()}"
    Path(tmp).write_bytes(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"{self.path}: truncated at offset {self.pos}, needed {n} more bytes"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, shape: tuple) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a gridhaze checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version} unsupported (expected {VERSION})")
    (cfg_len,) = r.unpack("<I")
    try:
        config = GridConfig.from_json(r.take(cfg_len).decode("utf-8"))
    except (ValueError, TypeError, KeyError, ConfigError) as exc:
        raise CheckpointError(f"{path}: invalid embedded config: {exc}") from exc
    step, seed = r.unpack("<QQ")
    (n_params,) = r.unpack("<I")
    expected = parameter_shapes(config)
    if n_params != len(expected):
        raise CheckpointError(f"{path}: {n_params} parameters stored, config implies {len(expected)}")
    tensors = {}
    for name_exp, shape_exp in expected:
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        if name != name_exp or tuple(shape) != tuple(shape_exp):
            raise CheckpointError(
                f"{path}: parameter table mismatch: found {name} {tuple(shape)}, "
                f"config implies {name_exp} {tuple(shape_exp)}"
            )
        tensors[name] = Tensor(r.floats(shape), requires_grad=True, name=name)
    t, b1, b2, eps = r.unpack("<Qddd")
    opt = AdamState(beta1=b1, beta2=b2, eps=eps, t=t)
    (has_moments,) = r.unpack("<B")
    if has_moments:
        for name, shape in expected:
            opt.m[name] = r.floats(shape).copy()
            opt.v[name] = r.floats(shape).copy()
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes after offset {r.pos}")
    return Checkpoint(ModelParams(config, tensors), opt, config, step, seed)
