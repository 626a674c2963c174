"""On-disk dataset layout, manifest validation and the CSV interfaces.

A dataset directory holds::

    annotations.csv   image_id,class,x_min,y_min,x_max,y_max   (one row per box)
    splits.csv        image_id,split
    images/<id>.ppm
    masks/<id>.pgm    bleeding frames only, 0 / 255

Boxes are half-open pixel rectangles.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .imageops.netpbm import NetpbmError, read_image, read_mask, write_image, write_mask
from .metrics import DetectionRecord
from .types import BoxAnnotation, LabeledSample, one_hot

ANNOTATION_HEADER = ["image_id", "class", "x_min", "y_min", "x_max", "y_max"]
DETECTION_HEADER = ["image_id", "score", "x_min", "y_min", "x_max", "y_max"]
VERDICT_HEADER = ["image_id", "pred_class", "prob_bleeding"]
METRIC_HEADER = ["metric", "value"]
SPLIT_HEADER = ["image_id", "split"]
CLASS_NAMES = ("none", "bleeding")
SPLITS = ("train", "val", "test")


class DataError(Exception):
    """Malformed or inconsistent dataset content."""


@dataclass
class FrameEntry:
    image_id: str
    label: int
    boxes: list[tuple[int, int, int, int]] = field(default_factory=list)


@dataclass
class Manifest:
    root: Path
    frames: dict[str, FrameEntry]
    splits: dict[str, list[str]]

    def image_path(self, image_id: str) -> Path:
        return self.root / "images" / f"{image_id}.ppm"

    def mask_path(self, image_id: str) -> Path:
        return self.root / "masks" / f"{image_id}.pgm"

    def ids(self, split: str | None = None) -> list[str]:
        if split is None:
            return sorted(self.frames)
        if split not in self.splits:
            raise DataError(f"unknown split {split!r}; have {sorted(self.splits)}")
        return list(self.splits[split])


def _read_csv(path: Path, header: Sequence[str]) -> list[tuple[int, list[str]]]:
    """Rows with their 1-based line numbers, header checked."""
    if not path.is_file():
        raise DataError(f"missing {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != list(header):
        raise DataError(f"{path}: expected header {','.join(header)}")
    out = []
    for n, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{n}: expected {len(header)} fields, got {len(row)}")
        out.append((n, [c.strip() for c in row]))
    return out


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------


def write_dataset(root: str | os.PathLike, samples: list[LabeledSample], splits: dict[str, list[str]]) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in sorted(samples, key=lambda s: s.image_id):
        write_image(root / "images" / f"{s.image_id}.ppm", s.image)
        if s.label == 1:
            write_mask(root / "masks" / f"{s.image_id}.pgm", s.mask)
            for b in s.boxes:
                x0, y0, x1, y1 = (int(round(v)) for v in b.to_xyxy(s.width, s.height))
                rows.append([s.image_id, "bleeding", x0, y0, x1, y1])
        else:
            rows.append([s.image_id, "none", "", "", "", ""])
    _write_csv(root / "annotations.csv", ANNOTATION_HEADER, rows)
    _write_csv(root / "splits.csv", SPLIT_HEADER, [[i, name] for name in SPLITS for i in splits.get(name, [])])


def read_manifest(root: str | os.PathLike, check_files: bool = True) -> Manifest:
    """Parse and validate annotations.csv / splits.csv; raises DataError on any inconsistency."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    ann = root / "annotations.csv"
    frames: dict[str, FrameEntry] = {}
    for n, (iid, cls, *coords) in _read_csv(ann, ANNOTATION_HEADER):
        if not iid:
            raise DataError(f"{ann}:{n}: empty image_id")
        if cls not in CLASS_NAMES:
            raise DataError(f"{ann}:{n}: class must be one of {CLASS_NAMES}, got {cls!r}")
        label = CLASS_NAMES.index(cls)
        entry = frames.setdefault(iid, FrameEntry(iid, label))
        if entry.label != label:
            raise DataError(f"{ann}:{n}: {iid} is listed as both bleeding and none")
        if label == 0:
            if any(coords):
                raise DataError(f"{ann}:{n}: non-bleeding frame {iid} carries a box")
            continue
        try:
            x0, y0, x1, y1 = (int(c) for c in coords)
        except ValueError:
            raise DataError(f"{ann}:{n}: bleeding frame {iid} needs integer box fields") from None
        if x1 <= x0 or y1 <= y0 or min(x0, y0) < 0:
            raise DataError(f"{ann}:{n}: invalid box {x0},{y0},{x1},{y1}")
        entry.boxes.append((x0, y0, x1, y1))

    splits: dict[str, list[str]] = {}
    sp = root / "splits.csv"
    seen: set[str] = set()
    for n, (iid, name) in _read_csv(sp, SPLIT_HEADER):
        if name not in SPLITS:
            raise DataError(f"{sp}:{n}: unknown split {name!r}")
        if iid not in frames:
            raise DataError(f"{sp}:{n}: {iid} has no annotation")
        if iid in seen:
            raise DataError(f"{sp}:{n}: {iid} appears in more than one split")
        seen.add(iid)
        splits.setdefault(name, []).append(iid)
    manifest = Manifest(root, frames, {k: sorted(v) for k, v in splits.items()})
    if check_files:
        _check_files(manifest)
    return manifest


def _check_files(m: Manifest) -> None:
    problems = []
    for iid, e in sorted(m.frames.items()):
        if not m.image_path(iid).is_file():
            problems.append(f"{iid}: missing image")
        has_mask = m.mask_path(iid).is_file()
        if e.label == 1 and not has_mask:
            problems.append(f"{iid}: bleeding frame without mask")
        if e.label == 0 and has_mask:
            problems.append(f"{iid}: non-bleeding frame has a mask")
    if problems:
        raise DataError("dataset validation failed:\n  " + "\n  ".join(problems))


def load_sample(m: Manifest, image_id: str) -> LabeledSample:
    e = m.frames[image_id]
    try:
        img = read_image(m.image_path(image_id))
        mask = read_mask(m.mask_path(image_id)) if e.label == 1 else np.zeros(img.shape[:2], np.uint8)
    except (OSError, NetpbmError) as exc:
        raise DataError(f"{image_id}: {exc}") from exc
    h, w = img.shape[:2]
    if mask.shape != (h, w):
        raise DataError(f"{image_id}: mask {mask.shape} does not match image {(h, w)}")
    for x0, y0, x1, y1 in e.boxes:
        if x1 > w or y1 > h:
            raise DataError(f"{image_id}: box {x0},{y0},{x1},{y1} exceeds the {w}x{h} frame")
    boxes = [BoxAnnotation.from_xyxy(*b, w, h) for b in e.boxes]
    return LabeledSample(img, one_hot(e.label), boxes, mask, image_id)


def load_split(m: Manifest, split: str | None) -> list[LabeledSample]:
    return [load_sample(m, i) for i in m.ids(split)]


def gt_boxes_xyxy(m: Manifest, ids: Iterable[str]) -> dict[str, np.ndarray]:
    return {i: np.array(m.frames[i].boxes, dtype=np.float64).reshape(-1, 4) for i in ids}


# ---------------------------------------------------------------------------
# prediction files
# ---------------------------------------------------------------------------


def write_detections(path: str | os.PathLike, records: Iterable[DetectionRecord]) -> None:
    _write_csv(Path(path), DETECTION_HEADER, ([r.image_id, _fmt(r.score), *(_fmt(v) for v in r.box)] for r in records))


def read_detections(path: str | os.PathLike) -> list[DetectionRecord]:
    path = Path(path)
    out = []
    for n, (iid, score, *box) in _read_csv(path, DETECTION_HEADER):
        try:
            out.append(DetectionRecord(iid, float(score), tuple(float(v) for v in box)))
        except ValueError:
            raise DataError(f"{path}:{n}: non-numeric detection field") from None
    return out


@dataclass(frozen=True)
class Verdict:
    image_id: str
    pred_class: int
    prob_bleeding: float


def write_verdicts(path: str | os.PathLike, verdicts: Iterable[Verdict]) -> None:
    _write_csv(Path(path), VERDICT_HEADER, ([v.image_id, CLASS_NAMES[v.pred_class], _fmt(v.prob_bleeding)] for v in verdicts))


def read_verdicts(path: str | os.PathLike) -> dict[str, Verdict]:
    path = Path(path)
    out = {}
    for n, (iid, cls, prob) in _read_csv(path, VERDICT_HEADER):
        if cls not in CLASS_NAMES:
            raise DataError(f"{path}:{n}: pred_class must be one of {CLASS_NAMES}")
        try:
            out[iid] = Verdict(iid, CLASS_NAMES.index(cls), float(prob))
        except ValueError:
            raise DataError(f"{path}:{n}: prob_bleeding is not a number") from None
    return out


def write_metrics(path: str | os.PathLike, metrics: Sequence[tuple[str, float]]) -> None:
    _write_csv(Path(path), METRIC_HEADER, ([k, _fmt(v)] for k, v in metrics))


def read_metrics(path: str | os.PathLike) -> dict[str, float]:
    return {k: float(v) for _, (k, v) in _read_csv(Path(path), METRIC_HEADER)}
