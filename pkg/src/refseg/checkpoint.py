"""Versioned binary checkpoints.

Layout, all integers little-endian::

    b"SGCK" | version u16
    config_len u32 | config JSON (sorted keys, compact)
    step u64
    count u32, then per tensor:
        kind u8 (0 param, 1 first moment, 2 second moment)
        name_len u16 | name utf-8
        dtype u8 (0 float32, 1 float64) | ndims u8 | dims u32 * ndims
        payload (row-major, little-endian)

Entries are written in parameter order, so saving a loaded checkpoint
reproduces the original bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import FormatError
from .model import ReferringSegmenter
from .training import AdamW

MAGIC = b"SGCK"
VERSION = 1
KIND_PARAM, KIND_M, KIND_V = 0, 1, 2
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Checkpoint:
    model: ReferringSegmenter
    optimizer: AdamW

    @property
    def config(self) -> RunConfig:
        return self.model.config

    @property
    def step(self) -> int:
        return self.optimizer.step_count


def _entry(kind: int, name: str, array: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    code = _CODES[array.dtype]
    head = struct.pack("<BH", kind, len(raw)) + raw + struct.pack("<BB", code, array.ndim)
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    return head + dims + np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()


def encode_checkpoint(model: ReferringSegmenter, optimizer: AdamW) -> bytes:
    config = model.config.to_json().encode("utf-8")
    params = model.named_parameters()
    entries = [_entry(KIND_PARAM, name, p.data) for name, p in params.items()]
    entries += [_entry(KIND_M, name, optimizer.m[name]) for name in params]
    entries += [_entry(KIND_V, name, optimizer.v[name]) for name in params]
    head = MAGIC + struct.pack("<HI", VERSION, len(config)) + config
    head += struct.pack("<QI", optimizer.step_count, len(entries))
    return head + b"".join(entries)


def save_checkpoint(path: str | Path, model: ReferringSegmenter, optimizer: AdamW) -> None:
    Path(path).write_bytes(encode_checkpoint(model, optimizer))


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, size: int, what: str) -> bytes:
        end = self.pos + size
        if end > len(self.data):
            raise FormatError(
                f"{self.source}: {what} needs {size} bytes at offset {self.pos}, only {len(self.data) - self.pos} left"
            )
        chunk = self.data[self.pos : end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(data, source)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{source}: bad magic at byte 0, expected {MAGIC!r}")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version} at byte 4")
    (config_len,) = r.unpack("<I", "config length")
    try:
        config = RunConfig.from_dict(json.loads(r.take(config_len, "config").decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: unreadable config block at byte 10: {exc}") from None
    step, count = r.unpack("<QI", "step and entry count")
    tables = {KIND_PARAM: {}, KIND_M: {}, KIND_V: {}}
    for _ in range(count):
        start = r.pos
        kind, name_len = r.unpack("<BH", "entry header")
        if kind not in tables:
            raise FormatError(f"{source}: unknown entry kind {kind} at byte {start}")
        name = r.take(name_len, "entry name").decode("utf-8")
        code, ndims = r.unpack("<BB", "entry dtype")
        if code not in _DTYPES:
            raise FormatError(f"{source}: unknown dtype code {code} for {name!r}")
        dims = r.unpack(f"<{ndims}I", "entry dims")
        dtype = _DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = r.take(size, f"payload of {name!r}")
        tables[kind][name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if r.pos != len(data):
        raise FormatError(f"{source}: {len(data) - r.pos} trailing bytes at offset {r.pos}")

    model = ReferringSegmenter(config)
    params = model.named_parameters()
    for kind, table in tables.items():
        if set(table) != set(params):
            missing = sorted(set(params) - set(table))
            extra = sorted(set(table) - set(params))
            raise FormatError(f"{source}: entry kind {kind} does not match the model (missing {missing}, extra {extra})")
    for name, p in params.items():
        if tables[KIND_PARAM][name].shape != p.shape:
            raise FormatError(f"{source}: {name!r} has shape {tables[KIND_PARAM][name].shape}, model expects {p.shape}")
        p.data = tables[KIND_PARAM][name].copy()
    optimizer = AdamW(params, config.lr, config.betas, config.adam_eps, config.weight_decay)
    for name in params:
        optimizer.m[name] = tables[KIND_M][name].copy()
        optimizer.v[name] = tables[KIND_V][name].copy()
    optimizer.step_count = int(step)
    return Checkpoint(model, optimizer)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), str(path))
