"""Binary PPM (P6) / PGM (P5) reading and writing, maxval 255."""

from __future__ import annotations

import os

import numpy as np


class NetpbmError(ValueError):
    pass


def _tokens(blob: bytes, count: int, pos: int) -> tuple[list[int], int]:
    out: list[int] = []
    n = len(blob)
    while len(out) < count:
        while pos < n and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < n and blob[pos : pos + 1] == b"#":
            while pos < n and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not blob[pos : pos + 1].isspace() and blob[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise NetpbmError("truncated header")
        out.append(int(blob[start:pos]))
    return out, pos


def decode(blob: bytes) -> np.ndarray:
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic {magic!r}; only P5/P6 are handled")
    (width, height, maxval), pos = _tokens(blob, 3, 2)
    if maxval != 255:
        raise NetpbmError(f"maxval {maxval} unsupported (need 255)")
    pos += 1  # single whitespace byte ends the header
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    raster = blob[pos : pos + need]
    if len(raster) != need:
        raise NetpbmError(f"raster truncated: {len(raster)} of {need} bytes")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return arr.copy() if channels == 3 else arr[:, :, 0].copy()


def encode(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise NetpbmError(f"expected uint8 samples, got {img.dtype}")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise NetpbmError(f"cannot encode shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def read_image(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())


def write_image(path: str | os.PathLike, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(img))


def read_mask(path: str | os.PathLike) -> np.ndarray:
    """PGM mask -> {0, 1} uint8 plane (any non-zero sample is foreground)."""
    return (read_image(path) > 0).astype(np.uint8)


def write_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    write_image(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)
