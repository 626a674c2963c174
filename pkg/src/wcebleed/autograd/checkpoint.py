"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic       4 bytes  b"WBLB"
    version     u8       1
    count       u32      number of tensors
    repeated count times:
        name_len  u32
        name      name_len bytes, UTF-8
        rank      u8
        shape     rank x u32
        payload   prod(shape) x f32
    hyper_len   u32
    hyper       hyper_len bytes, UTF-8 JSON object
"""

from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

MAGIC = b"WBLB"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def dumps(params: dict[str, np.ndarray], hyper: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BI", VERSION, len(params)))
    for name, value in params.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    meta = json.dumps(hyper or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    return buf.getvalue()


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {pos}, have {len(view) - pos}")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic: not a WBLB checkpoint")
    (version,) = struct.unpack("<B", take(1))
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (count,) = struct.unpack("<I", take(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        if name in params:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(bytes(take(4 * n)), dtype="<f4").reshape(shape).astype(np.float32)
    (meta_len,) = struct.unpack("<I", take(4))
    hyper = json.loads(bytes(take(meta_len)).decode("utf-8"))
    return params, hyper


def save_checkpoint(path: str | os.PathLike, params: dict[str, np.ndarray], hyper: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(params, hyper))


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())
