"""Seeded synthetic capsule-endoscopy-like frames with exact bleeding labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imageops.filters import gaussian_blur
from .types import BoxAnnotation, LabeledSample, one_hot


@dataclass(frozen=True)
class SyntheticSpec:
    num_bleeding: int = 250
    num_normal: int = 250
    image_size: int = 64
    blob_count: tuple[int, int] = (1, 2)
    blob_axes: tuple[float, float] = (4.0, 10.0)
    bleed_red: tuple[int, int] = (120, 165)
    bleed_green_blue: tuple[int, int] = (25, 55)
    noise_scale: float = 10.0
    corrupt: bool = False
    bubble_count: tuple[int, int] = (3, 8)
    bubble_radius: tuple[float, float] = (2.0, 5.0)
    decoy_count: tuple[int, int] = (2, 5)
    decoy_radius: tuple[float, float] = (3.0, 7.0)
    decoy_depth: float = 70.0
    decoy_pattern: str = "checker"
    contrast_range: tuple[float, float] = (0.35, 0.6)
    brightness_shift: float = 20.0
    shading: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size % 32 or self.image_size < 32:
            raise ValueError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.num_bleeding < 0 or self.num_normal < 0:
            raise ValueError("frame counts must be >= 0")
        for name in ("blob_count", "blob_axes", "bleed_red", "bleed_green_blue", "bubble_count", "bubble_radius", "decoy_count", "decoy_radius", "contrast_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range {lo}..{hi}")
        if self.blob_count[0] < 1:
            raise ValueError("bleeding frames need at least one blob")
        if self.blob_axes[0] < 1 or 2 * self.blob_axes[1] + 4 > self.image_size:
            raise ValueError(f"blob_axes {self.blob_axes} do not fit a {self.image_size}px frame")
        if not 0 <= self.shading < 1:
            raise ValueError(f"shading must lie in [0, 1), got {self.shading}")
        if self.decoy_pattern not in ("checker", "speck"):
            raise ValueError(f"decoy_pattern must be 'checker' or 'speck', got {self.decoy_pattern!r}")
        if not 0 < self.contrast_range[0] <= self.contrast_range[1] <= 1:
            raise ValueError("contrast_range must lie in (0, 1]")

    @property
    def num_frames(self) -> int:
        return self.num_bleeding + self.num_normal


def frame_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, 0x5EED], counter=[0, 0, 0, index]))


def ellipse_mask(size: int, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    """Pixels whose centres fall inside the rotated ellipse."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / a
    v = (-s * dx + c * dy) / b
    return (u * u + v * v) <= 1.0


def mask_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Half-open pixel bounding box (x_min, y_min, x_max, y_max) of a non-empty mask."""
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    n = gaussian_blur(rng.normal(size=(size, size)), sigma=sigma, radius=int(np.ceil(2 * sigma)))
    return n / max(float(n.std()), 1e-6)


def _background(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    s = spec.image_size
    base = np.array([205.0, 125.0, 115.0]) + rng.uniform(-15, 15, size=3)
    shade = _smooth_noise(rng, s, 4.0)[..., None] * spec.noise_scale
    tint = np.stack([_smooth_noise(rng, s, 2.0) for _ in range(3)], axis=-1) * (spec.noise_scale * 0.3)
    return base + shade * np.array([1.0, 0.8, 0.8]) + tint


def _place_blobs(rng: np.random.Generator, spec: SyntheticSpec, count: int) -> list[np.ndarray]:
    s = spec.image_size
    masks: list[np.ndarray] = []
    occupied = np.zeros((s, s), dtype=bool)
    for _ in range(200):
        if len(masks) == count:
            break
        a, b = rng.uniform(*spec.blob_axes, size=2)
        margin = max(a, b) + 1
        cx, cy = rng.uniform(margin, s - margin, size=2)
        m = ellipse_mask(s, cx, cy, a, b, rng.uniform(0, np.pi))
        if not m.any():
            continue
        grown = ellipse_mask(s, cx, cy, a + 2, b + 2, 0.0) | m
        if (grown & occupied).any():
            continue
        masks.append(m)
        occupied |= grown
    return masks


def _corrupt(rng: np.random.Generator, img: np.ndarray, blob: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    # sharp G/B artefacts: red-looking pixels with no blood behind them.
    # "checker" discs are mean-free in G/B, "speck" dots are one-sided dips
    checker = np.where((np.arange(s)[:, None] + np.arange(s)[None, :]) % 2 == 0, -1.0, 1.0)
    for _ in range(rng.integers(spec.decoy_count[0], spec.decoy_count[1] + 1)):
        r = rng.uniform(*spec.decoy_radius)
        cx, cy = rng.uniform(0, s, size=2)
        disc = ((xx - cx) ** 2 + (yy - cy) ** 2 <= r * r) & ~blob
        pattern = checker if spec.decoy_pattern == "checker" else -1.0
        img[..., 1:] += (disc * pattern * spec.decoy_depth)[..., None]
    # bright specular bubbles
    for _ in range(rng.integers(spec.bubble_count[0], spec.bubble_count[1] + 1)):
        r = rng.uniform(*spec.bubble_radius)
        cx, cy = rng.uniform(0, s, size=2)
        d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        alpha = np.clip(1.2 - d / r, 0.0, 1.0) * 0.9
        alpha[blob] = 0.0
        img = img * (1 - alpha[..., None]) + 250.0 * alpha[..., None]
    # uneven illumination: a smooth multiplicative field darkening part of the frame
    if spec.shading > 0:
        field = _smooth_noise(rng, s, 12.0)
        field = (field - field.min()) / max(float(np.ptp(field)), 1e-6)
        img = img * (1.0 - spec.shading * field)[..., None]
    # global contrast compression around the frame mean plus a brightness offset
    c = rng.uniform(*spec.contrast_range)
    mean = img.mean(axis=(0, 1))
    return mean + c * (img - mean) + rng.uniform(-spec.brightness_shift, spec.brightness_shift)


def render_frame(spec: SyntheticSpec, index: int, bleeding: bool) -> LabeledSample:
    """Frame ``index``; every random draw is keyed by (spec.seed, index)."""
    rng = frame_rng(spec.seed, index)
    s = spec.image_size
    img = _background(rng, spec)
    masks = _place_blobs(rng, spec, int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))) if bleeding else []
    union = np.zeros((s, s), dtype=bool)
    boxes = []
    for m in masks:
        red = rng.uniform(*spec.bleed_red)
        gb = rng.uniform(*spec.bleed_green_blue, size=2)
        texture = 1.0 + 0.08 * _smooth_noise(rng, s, 1.5)
        colour = np.stack([red * texture, gb[0] * texture, gb[1] * texture], axis=-1)
        img[m] = colour[m]
        union |= m
        boxes.append(BoxAnnotation.from_xyxy(*mask_box(m), s, s))
    if spec.corrupt:
        img = _corrupt(rng, img, union, spec)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    label = 1 if masks else 0
    return LabeledSample(image, one_hot(label), boxes, union.astype(np.uint8), f"frame_{index:05d}")


def frame_labels(spec: SyntheticSpec) -> np.ndarray:
    """Seeded interleaving of bleeding (1) and normal (0) frames."""
    labels = np.array([1] * spec.num_bleeding + [0] * spec.num_normal, dtype=np.int64)
    return labels[np.random.default_rng(spec.seed).permutation(len(labels))]


def generate(spec: SyntheticSpec) -> list[LabeledSample]:
    return [render_frame(spec, i, bool(lab)) for i, lab in enumerate(frame_labels(spec))]


def split_ids(ids: list[str], seed: int, fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)) -> dict[str, list[str]]:
    """Seeded shuffle into train/val/test; rounding remainders go to train."""
    if abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"split fractions must be >= 0 and sum to 1, got {fractions}")
    order = [ids[i] for i in np.random.default_rng(seed + 7).permutation(len(ids))]
    n_val = int(round(fractions[1] * len(ids)))
    n_test = int(round(fractions[2] * len(ids)))
    n_train = len(ids) - n_val - n_test
    return {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train : n_train + n_val]),
        "test": sorted(order[n_train + n_val :]),
    }


def stack_samples(samples: list[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    """(N, H, W, 3) images and (N,) hard labels."""
    return np.stack([s.image for s in samples]), np.array([s.label for s in samples], dtype=np.int64)
