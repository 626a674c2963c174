"""Separable Gaussian blur with clamp-to-edge borders."""

from __future__ import annotations

import math
import warnings

import numpy as np


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _convolve_axis(plane: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    padded = np.pad(plane, pad, mode="edge")
    n = plane.shape[axis]
    out = np.zeros_like(plane, dtype=np.float64)
    for i, weight in enumerate(kernel):
        sl = [slice(None), slice(None)]
        sl[axis] = slice(i, i + n)
        out += weight * padded[tuple(sl)]
    return out


def gaussian_blur(plane: np.ndarray, sigma: float = 1.0, radius: int = 2) -> np.ndarray:
    """Blur a 2-D float plane; returns float32."""
    if radius < math.ceil(2 * sigma):
        warnings.warn(f"blur radius {radius} truncates a sigma={sigma} kernel (recommend >= {math.ceil(2 * sigma)})", stacklevel=2)
    k = gaussian_kernel(sigma, radius)
    plane = np.asarray(plane, dtype=np.float64)
    return _convolve_axis(_convolve_axis(plane, k, 0), k, 1).astype(np.float32)


def laplacian_energy(plane: np.ndarray) -> float:
    """Mean |4-neighbour Laplacian| over interior pixels."""
    p = np.asarray(plane, dtype=np.float64)
    lap = p[1:-1, :-2] + p[1:-1, 2:] + p[:-2, 1:-1] + p[2:, 1:-1] - 4 * p[1:-1, 1:-1]
    return float(np.abs(lap).mean())
