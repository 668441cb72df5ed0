"""Binary checkpoint format for named float64 parameters.

Layout (all integers little-endian)::

    magic       8 bytes   b"MITOSCKP"
    version     u32       FORMAT_VERSION
    count       u64       number of parameters
    count times:
        name_len  u64, name  UTF-8 bytes
        ndim      u64, dims  ndim x u64
        values    prod(dims) x f64, row-major
    meta_len    u64
    meta        UTF-8 JSON (sorted keys, compact separators), may be empty

Parameters are written in the order given; load-then-save reproduces the
file byte for byte.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MITOSCKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, len(ckpt.params)))
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8") if ckpt.metadata else b""
    buf.write(struct.pack("<Q", len(meta)))
    buf.write(meta)
    return buf.getvalue()


def loads(blob: bytes) -> Checkpoint:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<IQ", take(12))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {FORMAT_VERSION})")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<Q", take(8))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    (meta_len,) = struct.unpack("<Q", take(8))
    meta = json.loads(bytes(take(meta_len)).decode("utf-8")) if meta_len else {}
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after checkpoint")
    return Checkpoint(params, meta)


def save(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ckpt))


def load(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_bytes())
