"""The fixed colour-preprocessing chain applied to every frame."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .clahe import clahe
from .color import ChannelCountError, lab_to_srgb, srgb_to_lab
from .filters import gaussian_blur


@dataclass(frozen=True)
class PreprocessConfig:
    clahe_clip_limit: float = 2.0
    clahe_tiles: tuple[int, int] = (8, 8)
    blur_sigma: float = 1.0
    blur_radius: int = 2

    def __post_init__(self):
        if self.clahe_clip_limit < 1.0:
            raise ValueError("clahe_clip_limit must be >= 1")
        if min(self.clahe_tiles) < 1:
            raise ValueError("clahe_tiles must be >= (1, 1)")
        if self.blur_sigma <= 0:
            raise ValueError("blur_sigma must be > 0")
        if self.blur_radius < 1:
            raise ValueError("blur_radius must be >= 1")

    @property
    def radius_ok(self) -> bool:
        return self.blur_radius >= math.ceil(2 * self.blur_sigma)


def preprocess(img: np.ndarray, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """CLAHE on Lab lightness, back to RGB, then blur G and B (R untouched)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ChannelCountError(f"preprocess needs a 3-channel image, got shape {img.shape}")
    L, a, b = srgb_to_lab(img)
    L = clahe(L, cfg.clahe_clip_limit, cfg.clahe_tiles)
    rgb = lab_to_srgb(L, a, b)
    out = rgb.copy()
    for ch in (1, 2):
        blurred = gaussian_blur(rgb[:, :, ch].astype(np.float32), cfg.blur_sigma, cfg.blur_radius)
        out[:, :, ch] = np.clip(np.rint(blurred), 0, 255).astype(np.uint8)
    return out
