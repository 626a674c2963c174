"""Ablation-CAM: channel weights from the relative score drop when each channel is zeroed."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .autograd import Tensor, no_grad

RAW_DROP_THRESHOLD = 1e-8


class CamModel(Protocol):
    """Anything exposing a named spatial stage and a partial forward from it."""

    forward_count: int

    def capture(self, images, layer_id: str) -> Tensor: ...

    def forward_from(self, layer_id: str, act: Tensor) -> Tensor: ...


@dataclass
class ActivationStack:
    channels: np.ndarray  # (K, h, w)
    baseline_score: float
    layer_id: str
    class_id: int
    grid: np.ndarray  # the cached (1, h, w, K) stage output

    @property
    def num_channels(self) -> int:
        return self.channels.shape[0]


@dataclass
class CamHeatmap:
    plane: np.ndarray  # (H, W) in [0, 1]
    weights: np.ndarray  # (K,)
    raw_drop: bool  # weights are unnormalized drops because |y_c| was ~0
    coarse: np.ndarray  # relu(sum_k w_k A_k) at stage resolution, before resizing


def _score(model: CamModel, layer_id: str, grid: np.ndarray, class_id: int) -> float:
    return float(model.forward_from(layer_id, Tensor(grid)).data[0, class_id])


def capture_activations(model: CamModel, img: np.ndarray, layer_id: str, class_id: int = 1) -> ActivationStack:
    """Cache the stage output of one frame and its baseline class score (one partial forward)."""
    with no_grad():
        grid = model.capture(np.asarray(img), layer_id).data[:1]
        score = _score(model, layer_id, grid, class_id)
    return ActivationStack(np.ascontiguousarray(grid[0].transpose(2, 0, 1)), score, layer_id, class_id, grid)


def ablation_weights_from(model: CamModel, stack: ActivationStack) -> tuple[np.ndarray, bool]:
    """w_k = (y_c - y_c^k) / y_c, one partial forward per channel."""
    y = stack.baseline_score
    drops = np.empty(stack.num_channels)
    with no_grad():
        for k in range(stack.num_channels):
            ablated = stack.grid.copy()
            ablated[..., k] = 0.0
            drops[k] = y - _score(model, stack.layer_id, ablated, stack.class_id)
    if abs(y) < RAW_DROP_THRESHOLD:
        return drops, True
    return drops / y, False


def ablation_weights(model: CamModel, img: np.ndarray, layer_id: str, class_id: int = 1) -> np.ndarray:
    return ablation_weights_from(model, capture_activations(model, img, layer_id, class_id))[0]


def bilinear_resize(plane: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize with edge clamping."""
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape

    def coords(n_out, n_in):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, wy = coords(height, h)
    x0, x1, wx = coords(width, w)
    top = plane[y0][:, x0] * (1 - wx) + plane[y0][:, x1] * wx
    bottom = plane[y1][:, x0] * (1 - wx) + plane[y1][:, x1] * wx
    return top * (1 - wy[:, None]) + bottom * wy[:, None]


def minmax_normalize(plane: np.ndarray) -> np.ndarray:
    lo, hi = float(plane.min()), float(plane.max())
    if hi - lo <= 0:
        return np.zeros_like(plane, dtype=np.float64)
    return (plane - lo) / (hi - lo)


def cam_from_weights(channels: np.ndarray, weights: np.ndarray, size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """(normalized heatmap at ``size``, coarse relu map)."""
    coarse = np.maximum(np.tensordot(np.asarray(weights, dtype=np.float64), channels.astype(np.float64), axes=1), 0.0)
    if not coarse.any():
        return np.zeros(size), coarse
    return minmax_normalize(bilinear_resize(coarse, *size)), coarse


def ablation_cam(model: CamModel, img: np.ndarray, layer_id: str, class_id: int = 1) -> CamHeatmap:
    """K + 1 partial forwards: one baseline, one per ablated channel."""
    img = np.asarray(img)
    stack = capture_activations(model, img, layer_id, class_id)
    weights, raw = ablation_weights_from(model, stack)
    plane, coarse = cam_from_weights(stack.channels, weights, img.shape[:2])
    return CamHeatmap(plane, weights, raw, coarse)


def heatmap_to_gray(plane: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(plane * 255.0), 0, 255).astype(np.uint8)


def overlay(frame: np.ndarray, plane: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a red-to-yellow ramp of the heatmap onto the frame."""
    ramp = np.stack([np.ones_like(plane), plane, np.zeros_like(plane)], axis=-1) * 255.0
    out = (1 - alpha) * frame.astype(np.float64) + alpha * ramp
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def mass_inside(plane: np.ndarray, boxes_xyxy: np.ndarray, dilate: int = 4) -> float:
    """Fraction of heatmap mass inside the union of dilated pixel boxes."""
    total = float(plane.sum())
    if total <= 0:
        return 0.0
    h, w = plane.shape
    inside = np.zeros((h, w), dtype=bool)
    for x0, y0, x1, y1 in np.asarray(boxes_xyxy).reshape(-1, 4):
        ys = slice(max(0, int(np.floor(y0)) - dilate), min(h, int(np.ceil(y1)) + dilate))
        xs = slice(max(0, int(np.floor(x0)) - dilate), min(w, int(np.ceil(x1)) + dilate))
        inside[ys, xs] = True
    return float(plane[inside].sum()) / total
