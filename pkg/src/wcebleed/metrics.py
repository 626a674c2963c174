"""Classification, detection (AP) and mask metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class ClassificationReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    counts: ConfusionCounts


def classification_metrics(preds: Sequence[int], gts: Sequence[int], positive: int = 1) -> ClassificationReport:
    """Accuracy/precision/recall/F1 with bleeding (label 1) as the positive class."""
    preds = np.asarray(preds)
    gts = np.asarray(gts)
    if preds.shape != gts.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {gts.shape}")
    if preds.size == 0:
        raise ValueError("classification_metrics needs at least one sample")
    p, g = preds == positive, gts == positive
    counts = ConfusionCounts(int(np.sum(p & g)), int(np.sum(p & ~g)), int(np.sum(~p & ~g)), int(np.sum(~p & g)))
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return ClassificationReport(float(np.mean(preds == gts)), precision, recall, f1, counts)


def _check_box(b) -> None:
    if not (b[2] > b[0] and b[3] > b[1]):
        raise ValueError(f"degenerate box {tuple(b)}")


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two xyxy boxes."""
    _check_box(a)
    _check_box(b)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    score: float
    box: tuple[float, float, float, float]  # xyxy pixels

    def __post_init__(self):
        _check_box(self.box)


def sort_records(records: Sequence[DetectionRecord]) -> list[DetectionRecord]:
    """Descending score; ties by image_id then box, so the order is total."""
    return sorted(records, key=lambda r: (-r.score, r.image_id, tuple(r.box)))


def match_detections(
    dets: Sequence[DetectionRecord],
    gts: Mapping[str, np.ndarray],
    iou_thr: float,
) -> list[bool]:
    """Greedy TP/FP flags for score-sorted detections.

    Each detection takes the still-unmatched ground truth (same image) with the
    highest IoU >= ``iou_thr``; ties go to the lowest ground-truth index.
    """
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    flags = []
    for det in dets:
        gt = np.asarray(gts.get(det.image_id, np.zeros((0, 4)))).reshape(-1, 4)
        if len(gt) == 0:
            flags.append(False)
            continue
        ious = iou_matrix(np.array([det.box]), gt)[0]
        ious[used[det.image_id]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_thr:
            used[det.image_id][best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags: Sequence[bool], num_gt: int) -> float:
    """All-point interpolated AP from score-ordered TP flags.

    AP = sum over recall steps of (r_i - r_{i-1}) * max precision at recall >= r_i.
    With no ground truth: 1 if there are also no detections, else 0.
    """
    flags = np.asarray(flags, dtype=bool)
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    if num_gt == 0:
        return 1.0 if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def ap_at(records: Sequence[DetectionRecord], gts: Mapping[str, np.ndarray], iou_thr: float) -> float:
    ordered = sort_records(records)
    flags = match_detections(ordered, gts, iou_thr)
    num_gt = int(sum(len(np.asarray(v).reshape(-1, 4)) for v in gts.values()))
    return average_precision(flags, num_gt)


@dataclass(frozen=True)
class APResult:
    ap_per_threshold: dict[float, float] = field(default_factory=dict)

    @property
    def ap50(self) -> float:
        return self.ap_per_threshold[0.5]

    @property
    def ap50_95(self) -> float:
        return float(np.mean([self.ap_per_threshold[t] for t in IOU_THRESHOLDS]))


def ap_range(records: Sequence[DetectionRecord], gts: Mapping[str, np.ndarray]) -> APResult:
    """AP at IoU 0.50:0.05:0.95."""
    return APResult({t: ap_at(records, gts, t) for t in IOU_THRESHOLDS})


def _mask_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a) > 0, np.asarray(b) > 0
    if a.shape != b.shape:
        raise ValueError(f"mask sizes differ: {a.shape} vs {b.shape}")
    return a, b


def dice_coefficient(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _mask_pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.sum(a & b)) / total


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _mask_pair(a, b)
    union = int(np.sum(a | b))
    if union == 0:
        return 1.0
    return int(np.sum(a & b)) / union
