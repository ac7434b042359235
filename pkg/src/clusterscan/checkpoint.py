"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic   8 bytes  b"CLSCANCK"
    version u32
    width   u32      bytes per stored value: 4 (float32) or 8 (float64)
    cfglen  u32, then cfglen bytes of UTF-8 JSON (the NetworkConfig)
    count   u32      number of tensors, then per tensor:
        namelen u32, name bytes, rank u32, rank x u32 extents,
        prod(extents) values of the stored width
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import ContractError, get_dtype
from .network import Model, NetworkConfig, build, named_parameters

MAGIC = b"CLSCANCK"
VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointFormatError(ValueError):
    """The file is not a readable checkpoint (bad magic, version or truncation)."""


class CheckpointMismatch(ValueError):
    """The checkpoint's config or tensor names do not match what was expected."""


def _u32(v: int) -> bytes:
    return struct.pack("<I", v)


def encode(model: Model, width: int | None = None) -> bytes:
    width = np.dtype(get_dtype()).itemsize if width is None else width
    if width not in _DTYPES:
        raise ValueError("value width must be 4 or 8 bytes")
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    params = list(named_parameters(model))
    parts = [MAGIC, _u32(VERSION), _u32(width), _u32(len(cfg)), cfg, _u32(len(params))]
    for name, t in params:
        raw = name.encode()
        parts += [_u32(len(raw)), raw, _u32(t.ndim)]
        parts += [_u32(e) for e in t.shape]
        parts.append(np.ascontiguousarray(t.data, dtype=_DTYPES[width]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated checkpoint at byte {self.pos} (need {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode(buf: bytes) -> tuple:
    """Parse a checkpoint into ``(NetworkConfig, [(name, array), ...])``."""
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("bad magic: not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    width = r.u32()
    if width not in _DTYPES:
        raise CheckpointFormatError(f"unsupported value width {width}")
    try:
        cfg = NetworkConfig.from_dict(json.loads(r.take(r.u32()).decode()))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError, ContractError) as exc:
        raise CheckpointFormatError(f"unreadable config header: {exc}") from exc
    tensors = []
    for _ in range(r.u32()):
        try:
            name = r.take(r.u32()).decode()
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"unreadable tensor name: {exc}") from exc
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        dt = _DTYPES[width]
        tensors.append((name, np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape)))
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes after the last tensor")
    return cfg, tensors


def read_config(path) -> NetworkConfig:
    return decode(Path(path).read_bytes())[0]


def save(model: Model, path, width: int | None = None) -> None:
    Path(path).write_bytes(encode(model, width))


def load(path, expected: NetworkConfig | None = None) -> Model:
    """Rebuild a model from ``path``; nothing is returned unless the whole file parses."""
    cfg, tensors = decode(Path(path).read_bytes())
    if expected is not None and expected.to_dict() != cfg.to_dict():
        diff = {k: (v, cfg.to_dict()[k]) for k, v in expected.to_dict().items() if cfg.to_dict()[k] != v}
        raise CheckpointMismatch(f"checkpoint v{VERSION} config differs from expected: {diff}")
    model = build(cfg)
    slots = dict(named_parameters(model))
    names = [n for n, _ in tensors]
    if names != list(slots):
        missing = sorted(set(slots) - set(names))
        extra = sorted(set(names) - set(slots))
        raise CheckpointMismatch(f"tensor names differ: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, arr in tensors:
        t = slots[name]
        if arr.shape != t.shape:
            raise CheckpointMismatch(f"{name}: stored shape {arr.shape}, model expects {t.shape}")
        t.data = arr.astype(get_dtype())
    return model
