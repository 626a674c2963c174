"""sRGB <-> CIELAB (D65) conversion on 8-bit frames."""

from __future__ import annotations

import numpy as np

# sRGB primaries -> CIE XYZ, D65 reference white
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
# white point as the image of (1, 1, 1) so white lands exactly on a = b = 0
WHITE_D65 = _RGB_TO_XYZ.sum(axis=1)

_DELTA = 6.0 / 29.0


class ChannelCountError(ValueError):
    pass


def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def _f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _f_inv(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA, t**3, 3 * _DELTA**2 * (t - 4.0 / 29.0))


def srgb_to_lab(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split an (H, W, 3) uint8 sRGB frame into float32 L, a, b planes."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ChannelCountError(f"srgb_to_lab needs a 3-channel image, got shape {img.shape}")
    lin = _srgb_to_linear(img.astype(np.float64) / 255.0)
    xyz = lin @ _RGB_TO_XYZ.T / WHITE_D65
    fx, fy, fz = _f(xyz[..., 0]), _f(xyz[..., 1]), _f(xyz[..., 2])
    L = 116.0 * fy - 16.0
    a = 500.0 * (fx - fy)
    b = 200.0 * (fy - fz)
    return L.astype(np.float32), a.astype(np.float32), b.astype(np.float32)


def lab_to_srgb(L: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Inverse of :func:`srgb_to_lab`; out-of-gamut values are clamped to [0, 255]."""
    L, a, b = (np.asarray(p, dtype=np.float64) for p in (L, a, b))
    if not (L.shape == a.shape == b.shape):
        raise ValueError(f"plane sizes differ: {L.shape}, {a.shape}, {b.shape}")
    fy = (L + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0
    xyz = np.stack([_f_inv(fx), _f_inv(fy), _f_inv(fz)], axis=-1) * WHITE_D65
    lin = xyz @ _XYZ_TO_RGB.T
    rgb = _linear_to_srgb(lin) * 255.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
