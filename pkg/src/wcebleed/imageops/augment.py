"""Seeded, label-consistent augmentation.

Geometric transforms are composed into one 3x3 homography in continuous
pixel coordinates (pixel ``i`` spans ``[i, i + 1)``), then applied to the
image (bilinear), the mask (nearest) and the box corners alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ..types import BoxAnnotation, LabeledSample
from .filters import gaussian_blur


class DegenerateTransformError(ValueError):
    """The drawn geometric transform is not invertible."""


@dataclass(frozen=True)
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    rot_degrees_max: float = 15.0
    affine_translate_frac: float = 0.05
    affine_scale_range: tuple[float, float] = (0.9, 1.1)
    affine_shear_degrees: float = 5.0
    perspective_distort_scale: float = 0.1
    blur_prob: float = 0.2
    mixup_alpha: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip", "blur_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        lo, hi = self.affine_scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"affine_scale_range must satisfy 0 < lo <= hi, got {self.affine_scale_range}")
        if not 0.0 <= self.perspective_distort_scale <= 0.5:
            raise ValueError("perspective_distort_scale must lie in [0, 0.5]")
        if self.mixup_alpha <= 0:
            raise ValueError("mixup_alpha must be > 0")
        if self.rot_degrees_max < 0 or self.affine_translate_frac < 0 or self.affine_shear_degrees < 0:
            raise ValueError("rotation, translation and shear ranges must be non-negative")


@dataclass(frozen=True)
class AugmentDraw:
    hflip: bool = False
    vflip: bool = False
    angle: float = 0.0  # degrees, counter-clockwise on screen
    translate: tuple[float, float] = (0.0, 0.0)  # fraction of width / height
    scale: float = 1.0
    shear: float = 0.0  # degrees along x
    perspective: tuple[float, ...] = (0.0,) * 8  # corner offsets, fraction of half-size
    blur: bool = False
    blur_sigma: float = 1.0
    mixup_lambda: float = 1.0
    mixup_partner: float = 0.0  # uniform in [0, 1), picks the partner sample

    @property
    def only_flips(self) -> bool:
        return (
            self.angle == 0.0
            and self.translate == (0.0, 0.0)
            and self.scale == 1.0
            and self.shear == 0.0
            and not any(self.perspective)
        )


def _generator(seed: int, index: int) -> np.random.Generator:
    # counter-based: the index selects a disjoint block of the Philox counter space
    return np.random.Generator(np.random.Philox(key=seed % (1 << 64), counter=int(index) << 128))


def sample_augment(cfg: AugmentConfig, index: int) -> AugmentDraw:
    """Draw every random parameter for sample ``index``; pure in (cfg.seed, index)."""
    g = _generator(cfg.seed, index)
    # fixed draw order keeps streams aligned whatever the probabilities are
    u_h, u_v, u_rot, u_tx, u_ty, u_sc, u_sh, u_blur, u_sig, u_partner = g.random(10)
    persp = g.uniform(-1.0, 1.0, size=8) * cfg.perspective_distort_scale
    lam = float(g.beta(cfg.mixup_alpha, cfg.mixup_alpha))
    lo, hi = cfg.affine_scale_range
    return AugmentDraw(
        hflip=bool(u_h < cfg.p_hflip),
        vflip=bool(u_v < cfg.p_vflip),
        angle=float((2 * u_rot - 1) * cfg.rot_degrees_max),
        translate=(float((2 * u_tx - 1) * cfg.affine_translate_frac), float((2 * u_ty - 1) * cfg.affine_translate_frac)),
        scale=float(lo + (hi - lo) * u_sc),
        shear=float((2 * u_sh - 1) * cfg.affine_shear_degrees),
        perspective=tuple(float(p) for p in persp),
        blur=bool(u_blur < cfg.blur_prob),
        blur_sigma=float(0.1 + 1.9 * u_sig),
        mixup_lambda=lam,
        mixup_partner=float(u_partner),
    )


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def _translation(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def _perspective_matrix(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    a = []
    rhs = []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.extend([u, v])
    try:
        h = np.linalg.solve(np.array(a), np.array(rhs))
    except np.linalg.LinAlgError as exc:
        raise DegenerateTransformError("perspective corners are collinear") from exc
    return np.append(h, 1.0).reshape(3, 3)


def homography(draw: AugmentDraw, width: int, height: int) -> np.ndarray:
    """Source -> destination map in continuous pixel coordinates."""
    c = _translation(width / 2.0, height / 2.0)
    c_inv = _translation(-width / 2.0, -height / 2.0)
    flip = np.diag([-1.0 if draw.hflip else 1.0, -1.0 if draw.vflip else 1.0, 1.0])
    flip[0, 2] = width if draw.hflip else 0.0
    flip[1, 2] = height if draw.vflip else 0.0
    th = math.radians(draw.angle)
    # y grows downward, so a visually counter-clockwise turn uses -sin in the x row
    rot = np.array([[math.cos(th), math.sin(th), 0.0], [-math.sin(th), math.cos(th), 0.0], [0.0, 0.0, 1.0]])
    sh = math.tan(math.radians(draw.shear))
    affine = (
        _translation(draw.translate[0] * width, draw.translate[1] * height)
        @ np.array([[draw.scale, draw.scale * sh, 0.0], [0.0, draw.scale, 0.0], [0.0, 0.0, 1.0]])
    )
    H = flip
    H = c @ rot @ c_inv @ H
    H = c @ affine @ c_inv @ H
    if any(draw.perspective):
        src = np.array([[0, 0], [width, 0], [width, height], [0, height]], dtype=np.float64)
        off = np.array(draw.perspective).reshape(4, 2) * np.array([width / 2.0, height / 2.0])
        H = _perspective_matrix(src, src + off) @ H
    if abs(np.linalg.det(H)) < 1e-9 or abs(np.linalg.det(H[:2, :2])) < 1e-9:
        raise DegenerateTransformError(f"non-invertible transform for draw {draw}")
    return H


def _apply_h(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    homog = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ H.T
    w = homog[:, 2:3]
    if np.any(np.abs(w) < 1e-12):
        raise DegenerateTransformError("point mapped to infinity")
    return homog[:, :2] / w


def _source_coords(H: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample-space (index) source coordinates of every destination pixel centre."""
    jj, ii = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    pts = np.stack([jj.ravel(), ii.ravel()], axis=1)
    src = _apply_h(np.linalg.inv(H), pts) - 0.5
    return src[:, 0].reshape(height, width), src[:, 1].reshape(height, width)


def warp_image(img: np.ndarray, H: np.ndarray) -> np.ndarray:
    """Bilinear warp; samples falling outside the frame take the per-channel mean."""
    h, w = img.shape[:2]
    sx, sy = _source_coords(H, w, h)
    tol = 1e-6
    inside = (sx >= -tol) & (sx <= w - 1 + tol) & (sy >= -tol) & (sy <= h - 1 + tol)
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    src = img.astype(np.float64)
    if src.ndim == 2:
        src = src[..., None]
    top = (1 - fx) * src[y0, x0] + fx * src[y0, x1]
    bottom = (1 - fx) * src[y1, x0] + fx * src[y1, x1]
    out = (1 - fy) * top + fy * bottom
    fill = src.reshape(-1, src.shape[2]).mean(axis=0)
    out = np.where(inside[..., None], out, fill)
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out if img.ndim == 3 else out[..., 0]


def warp_mask(mask: np.ndarray, H: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    sx, sy = _source_coords(H, w, h)
    xi = np.rint(sx).astype(int)
    yi = np.rint(sy).astype(int)
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out = np.zeros_like(mask)
    out[inside] = mask[yi[inside], xi[inside]]
    return out


def warp_boxes(boxes: list[BoxAnnotation], H: np.ndarray, width: int, height: int) -> list[BoxAnnotation]:
    out = []
    for box in boxes:
        x0, y0, x1, y1 = box.to_xyxy(width, height)
        corners = _apply_h(H, np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]))
        nx0, ny0 = np.clip(corners.min(axis=0), 0, [width, height])
        nx1, ny1 = np.clip(corners.max(axis=0), 0, [width, height])
        if (nx1 - nx0) * (ny1 - ny0) < 1.0:
            continue
        out.append(BoxAnnotation.from_xyxy(nx0, ny0, nx1, ny1, width, height, box.class_id))
    return out


def _flip_box(box: BoxAnnotation, hflip: bool, vflip: bool) -> BoxAnnotation:
    return replace(box, cx=1.0 - box.cx if hflip else box.cx, cy=1.0 - box.cy if vflip else box.cy)


def apply_augment(sample: LabeledSample, draw: AugmentDraw) -> LabeledSample:
    """Apply one draw to image, boxes and mask consistently (blur touches the image only)."""
    img, mask, boxes = sample.image, sample.mask, list(sample.boxes)
    h, w = img.shape[:2]
    if draw.only_flips:
        # exact index flips: involutive and bit-exact
        axes = tuple(ax for ax, on in ((1, draw.hflip), (0, draw.vflip)) if on)
        if axes:
            img = np.flip(img, axis=axes).copy()
            mask = None if mask is None else np.flip(mask, axis=axes).copy()
            boxes = [_flip_box(b, draw.hflip, draw.vflip) for b in boxes]
    else:
        H = homography(draw, w, h)
        img = warp_image(img, H)
        mask = None if mask is None else warp_mask(mask, H)
        boxes = warp_boxes(boxes, H, w, h)
    if draw.blur:
        radius = max(1, math.ceil(2 * draw.blur_sigma))
        img = np.stack(
            [np.clip(np.rint(gaussian_blur(img[:, :, c], draw.blur_sigma, radius)), 0, 255) for c in range(img.shape[2])],
            axis=-1,
        ).astype(np.uint8)
    return LabeledSample(img, sample.class_probs.copy(), boxes, mask, sample.image_id)


def mixup(a: LabeledSample, b: LabeledSample, lam: float) -> LabeledSample:
    """Convex blend of two samples; boxes and mask follow the dominant one (lam >= 0.5 -> a)."""
    if a.image.shape != b.image.shape:
        raise ValueError(f"mixup size mismatch: {a.image.shape} vs {b.image.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 1.0:
        return LabeledSample(a.image.copy(), a.class_probs.copy(), list(a.boxes), None if a.mask is None else a.mask.copy(), a.image_id)
    if lam == 0.0:
        return LabeledSample(b.image.copy(), b.class_probs.copy(), list(b.boxes), None if b.mask is None else b.mask.copy(), b.image_id)
    blend = lam * a.image.astype(np.float64) + (1.0 - lam) * b.image.astype(np.float64)
    image = np.clip(np.rint(blend), 0, 255).astype(np.uint8)
    probs = lam * a.class_probs + (1.0 - lam) * b.class_probs
    dom = a if lam >= 0.5 else b
    mask = None if dom.mask is None else dom.mask.copy()
    return LabeledSample(image, probs, list(dom.boxes), mask, dom.image_id)


def augment_dataset(samples: list[LabeledSample], cfg: AugmentConfig, use_mixup: bool = True) -> list[LabeledSample]:
    """Augment every sample with its own draw; MixUp partners are drawn from the same stream."""
    out = []
    n = len(samples)
    for i, s in enumerate(samples):
        draw = sample_augment(cfg, i)
        aug = apply_augment(s, draw)
        if use_mixup and n > 1:
            j = (i + 1 + int(draw.mixup_partner * (n - 1))) % n
            partner = apply_augment(samples[j], sample_augment(cfg, j))
            aug = mixup(aug, partner, draw.mixup_lambda)
        out.append(aug)
    return out
