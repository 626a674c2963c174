"""Set-prediction pieces for the detector: GIoU, matching, focal and total loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..autograd import Tensor, ops

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25


# ---------------------------------------------------------------------------
# box geometry
# ---------------------------------------------------------------------------


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def _check_boxes(b: np.ndarray) -> None:
    if np.any(b[..., 2] <= b[..., 0]) or np.any(b[..., 3] <= b[..., 1]):
        raise ValueError("degenerate box: need x_max > x_min and y_max > y_min")


def giou(a, b) -> float:
    """Generalized IoU of two xyxy boxes, in (-1, 1]."""
    return float(giou_matrix(np.asarray(a).reshape(1, 4), np.asarray(b).reshape(1, 4))[0, 0])


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise GIoU, (N, 4) x (M, 4) xyxy -> (N, M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    _check_boxes(a)
    _check_boxes(b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.prod(np.clip(rb - lt, 0, None), axis=-1)
    area_a = np.prod(a[:, 2:] - a[:, :2], axis=-1)
    area_b = np.prod(b[:, 2:] - b[:, :2], axis=-1)
    union = area_a[:, None] + area_b[None, :] - inter
    enc = np.prod(np.maximum(a[:, None, 2:], b[None, :, 2:]) - np.minimum(a[:, None, :2], b[None, :, :2]), axis=-1)
    return inter / union - (enc - union) / enc


def giou_pairs(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise GIoU of matched xyxy boxes, (N, 4) x (N, 4) -> (N,), differentiable."""
    ax0, ay0, ax1, ay1 = (a[:, i] for i in range(4))
    bx0, by0, bx1, by1 = (b[:, i] for i in range(4))
    iw = ops.relu(ops.minimum(ax1, bx1) - ops.maximum(ax0, bx0))
    ih = ops.relu(ops.minimum(ay1, by1) - ops.maximum(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    enc = (ops.maximum(ax1, bx1) - ops.minimum(ax0, bx0)) * (ops.maximum(ay1, by1) - ops.minimum(ay0, by0))
    return inter / union - (enc - union) / enc


def cxcywh_to_xyxy_t(b: Tensor) -> Tensor:
    c, s = b[:, 0:2], b[:, 2:4] * 0.5
    return ops.concat([c - s, c + s], axis=1)


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int], ...]
    unmatched: tuple[int, ...]

    @property
    def query_idx(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs], dtype=np.int64)

    @property
    def target_idx(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs], dtype=np.int64)


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """Minimum-cost one-to-one assignment of min(K, M) pairs, sorted by query index."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    if np.isnan(cost).any():
        raise ValueError("NaN in matching cost")
    k = cost.shape[0]
    if cost.size == 0:
        return MatchResult((), tuple(range(k)))
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple(sorted(zip(rows.tolist(), cols.tolist())))
    used = set(rows.tolist())
    return MatchResult(pairs, tuple(i for i in range(k) if i not in used))


def focal_class_cost(prob: np.ndarray, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> np.ndarray:
    """Per-query cost of labelling it foreground, relative to background."""
    p = np.clip(prob, 1e-8, 1 - 1e-8)
    pos = alpha * (1 - p) ** gamma * -np.log(p)
    neg = (1 - alpha) * p**gamma * -np.log(1 - p)
    return pos - neg


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    u: float = 1.0
    iou_head: float = 1.0


def match_cost(prob: np.ndarray, boxes: np.ndarray, targets: np.ndarray, w: LossWeights) -> np.ndarray:
    """(K, M) cost: w_cls * focal class cost + w_l1 * L1 + w_giou * (1 - GIoU); boxes in cxcywh."""
    c_cls = focal_class_cost(prob)[:, None]
    c_l1 = np.abs(boxes[:, None, :] - targets[None, :, :]).sum(-1)
    c_giou = 1.0 - giou_matrix(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(targets))
    return w.cls * c_cls + w.l1 * c_l1 + w.giou * c_giou


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def sigmoid_focal_loss(logits: Tensor, targets: np.ndarray, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Summed binary focal loss -alpha_t (1 - p_t)^gamma log p_t."""
    t = np.asarray(targets, dtype=logits.dtype)
    p = ops.sigmoid(logits)
    tt = Tensor(t)
    p_t = p * tt + (1.0 - p) * (1.0 - tt)
    log_p_t = ops.log_sigmoid(logits) * tt + ops.log_sigmoid(-logits) * (1.0 - tt)
    alpha_t = Tensor(alpha * t + (1 - alpha) * (1 - t))
    return -(alpha_t * (1.0 - p_t) ** gamma * log_p_t).sum()


@dataclass
class LayerOutput:
    """Predictions of one decoder layer (or the encoder proposals) for a batch."""

    boxes: Tensor  # (B, K, 4) cxcywh in (0, 1)
    class_logits: Tensor  # (B, K, 1)
    iou_logits: Tensor  # (B, K)


@dataclass
class LossBreakdown:
    total: Tensor
    components: dict[str, float] = field(default_factory=dict)


def uncertainty(cls_probs: np.ndarray, iou_pred: np.ndarray) -> np.ndarray:
    """u_k = |max_c p[k, c] - iou_pred[k]|."""
    return np.abs(np.asarray(cls_probs).max(axis=-1) - np.asarray(iou_pred))


def detection_loss(
    layers: list[LayerOutput],
    targets: list[np.ndarray],
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Sum over layers of matched set losses; ``targets[b]`` is an (M_b, 4) cxcywh array.

    Matching runs independently per layer and image. Unmatched queries only
    see the focal term with a background target.
    """
    num_gt = max(1, sum(len(t) for t in targets))
    total = None
    parts = {"focal": 0.0, "l1": 0.0, "giou": 0.0, "u": 0.0, "iou_head": 0.0}
    for out in layers:
        b, k, _ = out.boxes.shape
        probs = ops._sigmoid_np(out.class_logits.data[..., 0])
        layer_terms = []
        for i in range(b):
            tgt = np.asarray(targets[i], dtype=np.float64).reshape(-1, 4)
            cls_target = np.zeros(k)
            logits_i = out.class_logits[i, :, 0]
            if len(tgt):
                cost = match_cost(probs[i].astype(np.float64), out.boxes.data[i].astype(np.float64), tgt, weights)
                m = hungarian_match(cost)
                qi, ti = m.query_idx, m.target_idx
                cls_target[qi] = 1.0
                pred = ops.take(out.boxes[i], qi, axis=0)
                gt = Tensor(tgt[ti].astype(out.boxes.dtype))
                l1 = ops.abs_(pred - gt).sum()
                g = giou_pairs(cxcywh_to_xyxy_t(pred), cxcywh_to_xyxy_t(gt))
                giou_term = (1.0 - g).sum()
                p_m = ops.sigmoid(ops.take(logits_i, qi, axis=0))
                q_m = ops.sigmoid(ops.take(out.iou_logits[i], qi, axis=0))
                u_term = ops.abs_(p_m - q_m).sum()
                iou_target = Tensor(np.clip(g.data, 0.0, 1.0))
                iou_term = ops.abs_(q_m - iou_target).sum()
                layer_terms += [weights.l1 * l1, weights.giou * giou_term, weights.u * u_term, weights.iou_head * iou_term]
                parts["l1"] += float(l1.data) / num_gt
                parts["giou"] += float(giou_term.data) / num_gt
                parts["u"] += float(u_term.data) / num_gt
                parts["iou_head"] += float(iou_term.data) / num_gt
            focal = sigmoid_focal_loss(logits_i, cls_target)
            layer_terms.append(weights.cls * focal)
            parts["focal"] += float(focal.data) / num_gt
        for t in layer_terms:
            total = t if total is None else total + t
    total = total / float(num_gt)
    return LossBreakdown(total, parts)
