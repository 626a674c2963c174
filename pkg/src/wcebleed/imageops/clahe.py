"""Contrast-limited adaptive histogram equalization."""

from __future__ import annotations

import numpy as np

NBINS = 256


def _quantize(plane: np.ndarray, value_max: float) -> np.ndarray:
    scaled = np.rint(np.asarray(plane, dtype=np.float64) * ((NBINS - 1) / value_max))
    return np.clip(scaled, 0, NBINS - 1).astype(np.intp)


def tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.rint(np.linspace(0, n, tiles + 1)).astype(int)


def tile_lut(bins: np.ndarray, clip_limit: float) -> np.ndarray:
    """Clipped-histogram CDF mapping for one tile, in output levels [0, 255].

    A tile with a single occupied bin has no contrast to redistribute and
    maps through the identity.
    """
    hist = np.bincount(bins.ravel(), minlength=NBINS).astype(np.float64)
    n = bins.size
    if np.count_nonzero(hist) <= 1:
        return np.arange(NBINS, dtype=np.float64)
    cap = clip_limit * n / NBINS
    excess = np.clip(hist - cap, 0, None).sum()
    if excess > 0:
        hist = np.minimum(hist, cap) + excess / NBINS
    return np.cumsum(hist) * ((NBINS - 1) / n)


def clahe_luts(plane: np.ndarray, clip_limit: float = 2.0, tiles: tuple[int, int] = (8, 8), value_max: float | None = None):
    """Per-tile transfer functions, shape (rows, cols, 256)."""
    plane = np.asarray(plane)
    value_max = _default_max(plane) if value_max is None else value_max
    _validate(plane, clip_limit, tiles)
    bins = _quantize(plane, value_max)
    ys, xs = tile_edges(plane.shape[0], tiles[0]), tile_edges(plane.shape[1], tiles[1])
    luts = np.empty((tiles[0], tiles[1], NBINS))
    for r in range(tiles[0]):
        for c in range(tiles[1]):
            luts[r, c] = tile_lut(bins[ys[r] : ys[r + 1], xs[c] : xs[c + 1]], clip_limit)
    return luts


def _default_max(plane: np.ndarray) -> float:
    return 255.0 if plane.dtype == np.uint8 else 100.0


def _validate(plane: np.ndarray, clip_limit: float, tiles: tuple[int, int]) -> None:
    if plane.ndim != 2:
        raise ValueError(f"clahe works on single planes, got shape {plane.shape}")
    if clip_limit < 1.0:
        raise ValueError(f"clip_limit must be >= 1, got {clip_limit}")
    rows, cols = tiles
    if rows < 1 or cols < 1:
        raise ValueError(f"tiles must be >= (1, 1), got {tiles}")
    if rows > plane.shape[0] or cols > plane.shape[1]:
        raise ValueError(f"tiles {tiles} larger than plane {plane.shape}")


def _interp_coords(n: int, edges: np.ndarray):
    """Fractional tile index of each pixel centre, clamped at the outer tile centres."""
    centers = (edges[:-1] + edges[1:]) / 2.0
    pos = np.arange(n) + 0.5
    frac = np.interp(pos, centers, np.arange(len(centers), dtype=np.float64))
    i0 = np.floor(frac).astype(int)
    i1 = np.minimum(i0 + 1, len(centers) - 1)
    return i0, i1, frac - i0


def clahe(
    plane: np.ndarray,
    clip_limit: float = 2.0,
    tiles: tuple[int, int] = (8, 8),
    value_max: float | None = None,
) -> np.ndarray:
    """Equalize a uint8 plane (range 0..255) or float L plane (range 0..100).

    Each tile's 256-bin histogram is clipped at ``clip_limit * pixels / 256``,
    the excess spread evenly, and the resulting CDF used as a lookup table.
    Pixels blend the four nearest tile tables bilinearly. The output has the
    input's dtype and value range.
    """
    plane = np.asarray(plane)
    value_max = _default_max(plane) if value_max is None else value_max
    luts = clahe_luts(plane, clip_limit, tiles, value_max)
    bins = _quantize(plane, value_max)
    # identity tiles pass the unquantized value through, so constant float
    # planes survive exactly
    identity = np.all(luts == np.arange(NBINS), axis=-1)
    exact = np.asarray(plane, dtype=np.float64) * ((NBINS - 1) / value_max)
    h, w = plane.shape
    y0, y1, wy = _interp_coords(h, tile_edges(h, tiles[0]))
    x0, x1, wx = _interp_coords(w, tile_edges(w, tiles[1]))
    Y0, X0 = np.meshgrid(y0, x0, indexing="ij")
    Y1, X1 = np.meshgrid(y1, x1, indexing="ij")
    WY, WX = np.meshgrid(wy, wx, indexing="ij")

    def mapped(Y, X):
        return np.where(identity[Y, X], exact, luts[Y, X, bins])

    top = (1 - WX) * mapped(Y0, X0) + WX * mapped(Y0, X1)
    bottom = (1 - WX) * mapped(Y1, X0) + WX * mapped(Y1, X1)
    levels = (1 - WY) * top + WY * bottom
    if plane.dtype == np.uint8:
        return np.clip(np.rint(levels), 0, 255).astype(np.uint8)
    return (levels * (value_max / (NBINS - 1))).astype(plane.dtype if plane.dtype.kind == "f" else np.float32)
