"""The commands behind the ``wcebleed`` CLI.

Each ``cmd_*`` takes a :class:`RunConfig` and writes its artifacts under the
configured output directory. Inference follows the staged design: classify
every frame, then run the detector, segmenter and Ablation-CAM only on frames
classified as bleeding.
"""

from __future__ import annotations

import csv
import logging
import shutil
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .autograd import CheckpointError, Module, load_checkpoint, save_checkpoint
from .cam import ablation_cam, heatmap_to_gray, overlay
from .config import ConfigError, RunConfig, dump_config, parse_config
from .dataset import (
    DataError,
    Manifest,
    Verdict,
    gt_boxes_xyxy,
    load_split,
    read_detections,
    read_manifest,
    read_verdicts,
    write_dataset,
    write_detections,
    write_metrics,
    write_verdicts,
)
from .imageops.augment import AugmentConfig, apply_augment, mixup, sample_augment
from .imageops.netpbm import NetpbmError, read_image, read_mask, write_image, write_mask
from .imageops.preprocess import PreprocessConfig, preprocess
from .metrics import ap_range, classification_metrics, dice_coefficient, mask_iou
from .models.detector import RTDETR, DetectorConfig, boxes_to_records, train_detector
from .models.segnet import SegConfig, SwinUNet, predict_mask, train_segmenter
from .models.swin import SwinClassifier, SwinConfig, evaluate_accuracy, train_classifier, write_log
from .synth import generate, split_ids
from .types import LabeledSample

log = logging.getLogger(__name__)

PREPROCESS_MARKER = "preprocess.cfg"
CHECKPOINTS = {"cls": "classifier.ckpt", "det": "detector.ckpt", "seg": "segmenter.ckpt"}
_MODELS = {
    "swin-classifier": (SwinClassifier, SwinConfig),
    "rtdetr-detector": (RTDETR, DetectorConfig),
    "seg-net": (SwinUNet, SegConfig),
}
_BATCH = 32


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _existing(cfg: RunConfig, key: str, kind: str = "dir") -> Path:
    p = cfg.path(key)
    ok = p.is_dir() if kind == "dir" else p.exists()
    if not ok:
        line = f" (line {cfg.lines[key]})" if key in cfg.lines else ""
        raise ConfigError(f"{cfg.source}: {key} = {cfg[key]}{line}: path {p} does not exist")
    return p


def _out_dir(cfg: RunConfig) -> Path:
    out = cfg.path("out")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def read_preprocess_marker(root: Path) -> PreprocessConfig | None:
    """The preprocessing a dataset directory went through, or None for raw frames."""
    path = Path(root) / PREPROCESS_MARKER
    if not path.is_file():
        return None
    return parse_config(path.read_text(), str(path)).section("preprocess")


def _marker_text(pcfg: PreprocessConfig) -> str:
    rc = RunConfig(values={f"preprocess.{f.name}": getattr(pcfg, f.name) for f in fields(pcfg)})
    return dump_config(rc)


def _write_rows(path: Path, rows: list) -> None:
    """CSV log from a list of dataclass rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if rows:
            names = [f.name for f in fields(rows[0])]
            w.writerow(names)
            for r in rows:
                w.writerow([v if isinstance(v, int) else f"{v:.8g}" for v in (getattr(r, n) for n in names)])


def _save_model(path: Path, model: Module, **extra) -> None:
    hyper = dict(model.hyper())
    hyper.update(extra)
    save_checkpoint(path, model.state_dict(), hyper)


def load_model(path: Path, kind: str) -> tuple[Module, dict]:
    """Rebuild a model from a checkpoint written by one of the train commands."""
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} does not exist")
    try:
        params, hyper = load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if hyper.get("model") != kind:
        raise ConfigError(f"{path}: expected a {kind} checkpoint, found {hyper.get('model')!r}")
    model_cls, cfg_cls = _MODELS[kind]
    model = model_cls(cfg_cls.from_dict(hyper["config"]), 0)
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: checkpoint does not match its recorded config: {exc}") from exc
    return model, hyper


def _checkpoint_preprocess(hyper: dict) -> PreprocessConfig | None:
    p = hyper.get("preprocess")
    if p is None:
        return None
    p = dict(p)
    p["clahe_tiles"] = tuple(p["clahe_tiles"])
    return PreprocessConfig(**p)


def _stack(samples: list[LabeledSample]) -> np.ndarray:
    if not samples:
        return np.zeros((0, 0, 0, 3), np.uint8)
    return np.stack([s.image for s in samples])


def _manifest(cfg: RunConfig) -> Manifest:
    return read_manifest(_existing(cfg, "data"))


# ---------------------------------------------------------------------------
# data commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig) -> Path:
    spec = cfg.section("synth", seed=cfg.seed)
    out = _out_dir(cfg)
    samples = generate(spec)
    splits = split_ids([s.image_id for s in samples], cfg.seed, cfg["split_fractions"])
    write_dataset(out, samples, splits)
    log.info("wrote %d frames to %s", len(samples), out)
    return out


def cmd_preprocess(cfg: RunConfig) -> Path:
    """Preprocess every frame of a dataset; annotations, splits and masks are copied unchanged."""
    pcfg = cfg.section("preprocess")
    m = _manifest(cfg)
    src, out = m.root, _out_dir(cfg)
    if out.resolve() == src.resolve():
        raise ConfigError("preprocess: out must differ from data")
    if read_preprocess_marker(src) is not None:
        raise DataError(f"{src} is already preprocessed")
    (out / "images").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    errors = []
    for iid in m.ids():
        try:
            write_image(out / "images" / f"{iid}.ppm", preprocess(read_image(m.image_path(iid)), pcfg))
            if m.frames[iid].label == 1:
                shutil.copyfile(m.mask_path(iid), out / "masks" / f"{iid}.pgm")
        except (OSError, NetpbmError, ValueError) as exc:
            errors.append(f"{iid}: {exc}")
    if errors:
        raise DataError(f"preprocess failed on {len(errors)} frame(s):\n  " + "\n  ".join(errors))
    for name in ("annotations.csv", "splits.csv"):
        shutil.copyfile(src / name, out / name)
    (out / PREPROCESS_MARKER).write_text(_marker_text(pcfg))
    log.info("preprocessed %d frames into %s", len(m.frames), out)
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def classifier_augmenter(aug: AugmentConfig, use_mixup: bool):
    """batch_transform for train_classifier: per-sample draws keyed by indices from the trainer's rng."""

    def transform(rng: np.random.Generator, xb: np.ndarray, yb: np.ndarray):
        keys = rng.integers(0, 2**62, size=len(xb))
        draws = [sample_augment(aug, int(k)) for k in keys]
        samples = [apply_augment(LabeledSample(x, y), d) for x, y, d in zip(xb, yb, draws)]
        n = len(samples)
        if use_mixup and n > 1:
            samples = [
                mixup(s, samples[(i + 1 + int(d.mixup_partner * (n - 1))) % n], d.mixup_lambda)
                for i, (s, d) in enumerate(zip(samples, draws))
            ]
        return np.stack([s.image for s in samples]), np.stack([s.class_probs for s in samples])

    return transform


def fit_classifier(cfg: RunConfig, train: list[LabeledSample], val: list[LabeledSample], seed: int):
    tcfg = cfg.section("cls", seed=seed)
    transform = None
    if tcfg.augment:
        transform = classifier_augmenter(cfg.section("augment", seed=seed + 11), tcfg.mixup)
    return train_classifier(
        _stack(train),
        np.stack([s.class_probs for s in train]),
        cfg.section("cls_model"),
        tcfg,
        _stack(val) if val else None,
        np.array([s.label for s in val]) if val else None,
        batch_transform=transform,
    )


def _train_val(cfg: RunConfig, bleeding_only: bool = False):
    m = _manifest(cfg)
    train, val = load_split(m, "train"), load_split(m, "val") if "val" in m.splits else []
    if bleeding_only:
        train, val = [s for s in train if s.label == 1], [s for s in val if s.label == 1]
    if not train:
        raise DataError(f"{m.root}: the train split has no usable frames")
    return m, train, val


def cmd_train_cls(cfg: RunConfig) -> Path:
    m, train, val = _train_val(cfg)
    model, rows = fit_classifier(cfg, train, val, cfg.seed)
    out = _out_dir(cfg)
    pcfg = read_preprocess_marker(m.root)
    _save_model(out / CHECKPOINTS["cls"], model, preprocess=asdict(pcfg) if pcfg else None)
    write_log(out / "classifier_log.csv", rows)
    return out / CHECKPOINTS["cls"]


def cmd_train_det(cfg: RunConfig) -> Path:
    m, train, val = _train_val(cfg, bleeding_only=True)
    targets = [np.array([b.as_array() for b in s.boxes]) for s in train]
    val_targets = [np.array([b.as_array() for b in s.boxes]) for s in val]
    model, rows = train_detector(
        _stack(train),
        targets,
        cfg.section("det_model"),
        cfg.det_train_config(),
        _stack(val) if val else None,
        val_targets if val else None,
    )
    out = _out_dir(cfg)
    pcfg = read_preprocess_marker(m.root)
    _save_model(out / CHECKPOINTS["det"], model, preprocess=asdict(pcfg) if pcfg else None)
    _write_rows(out / "detector_log.csv", rows)
    return out / CHECKPOINTS["det"]


def cmd_train_seg(cfg: RunConfig) -> Path:
    m, train, val = _train_val(cfg, bleeding_only=True)
    model, rows = train_segmenter(
        _stack(train),
        np.stack([s.mask for s in train]),
        cfg.seg_config(),
        cfg.section("seg", seed=cfg.seed),
        _stack(val) if val else None,
        np.stack([s.mask for s in val]) if val else None,
    )
    out = _out_dir(cfg)
    pcfg = read_preprocess_marker(m.root)
    _save_model(out / CHECKPOINTS["seg"], model, preprocess=asdict(pcfg) if pcfg else None)
    _write_rows(out / "segmenter_log.csv", rows)
    return out / CHECKPOINTS["seg"]


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


@dataclass
class InferSummary:
    frames: int
    bleeding: int
    detector_forwards: int
    segmenter_forwards: int
    cam_forwards: int

    def rows(self) -> list[tuple[str, float]]:
        return [(f.name, float(getattr(self, f.name))) for f in fields(self)]


def list_frames(path: Path) -> list[tuple[str, Path]]:
    """(image_id, path) for a single .ppm or every .ppm in a directory (or its images/ subdirectory)."""
    if path.is_file():
        return [(path.stem, path)]
    if (path / "images").is_dir():
        path = path / "images"
    frames = sorted((p.stem, p) for p in path.glob("*.ppm"))
    if not frames:
        raise DataError(f"no .ppm frames found in {path}")
    return frames


def _prepared(images: np.ndarray, pcfg: PreprocessConfig | None) -> np.ndarray:
    if pcfg is None:
        return images
    return np.stack([preprocess(img, pcfg) for img in images]) if len(images) else images


def _check_size(images: np.ndarray, size: int, what: str) -> None:
    if images.shape[1:3] != (size, size):
        raise DataError(f"frames are {images.shape[2]}x{images.shape[1]} but the {what} expects {size}x{size}")


def cmd_infer(cfg: RunConfig) -> InferSummary:
    ckpt = _existing(cfg, "checkpoints")
    frames = list_frames(_existing(cfg, "input", kind="any"))
    cls, cls_h = load_model(ckpt / CHECKPOINTS["cls"], "swin-classifier")
    det, det_h = load_model(ckpt / CHECKPOINTS["det"], "rtdetr-detector")
    seg, seg_h = load_model(ckpt / CHECKPOINTS["seg"], "seg-net")
    layer = cfg["cam_layer"] or cls.default_layer
    if layer not in cls.layer_ids:
        raise ConfigError(f"cam_layer {layer!r} is not one of {cls.layer_ids}")
    out = _out_dir(cfg)
    for sub in ("masks", "overlays", "heatmaps"):
        (out / sub).mkdir(exist_ok=True)

    try:
        raw = np.stack([read_image(p) for _, p in frames])
    except (OSError, NetpbmError, ValueError) as exc:
        raise DataError(f"cannot read input frames: {exc}") from exc
    ids = [i for i, _ in frames]
    _check_size(raw, cls.cfg.input_size, "classifier")

    cls_in = _prepared(raw, _checkpoint_preprocess(cls_h))
    probs = cls.predict_proba(cls_in)[:, 1].astype(np.float64)
    positive = probs >= float(cfg["bleeding_threshold"])
    write_verdicts(out / "verdicts.csv", [Verdict(i, int(b), float(p)) for i, b, p in zip(ids, positive, probs)])

    pos = np.flatnonzero(positive)
    records = []
    if len(pos):
        det_in = _prepared(raw[pos], _checkpoint_preprocess(det_h))
        seg_in = _prepared(raw[pos], _checkpoint_preprocess(seg_h))
        _check_size(det_in, det.cfg.input_size, "detector")
        _check_size(seg_in, seg.cfg.encoder.input_size, "segmenter")
        size = det.cfg.input_size
        thr = float(cfg["det_score_threshold"])
        for k, (scores, boxes) in zip(pos, det.predict(det_in, batch_size=_BATCH)):
            keep = scores >= thr
            records += boxes_to_records(ids[k], scores[keep], boxes[keep], size)
        masks = np.concatenate(
            [predict_mask(seg, seg_in[i : i + _BATCH], float(cfg["mask_threshold"])) for i in range(0, len(pos), _BATCH)]
        )
        cls.forward_count = 0
        for j, k in enumerate(pos):
            write_mask(out / "masks" / f"{ids[k]}.pgm", masks[j])
            heat = ablation_cam(cls, cls_in[k], layer, int(cfg["cam_class"]))
            write_mask(out / "heatmaps" / f"{ids[k]}.pgm", heatmap_to_gray(heat.plane))
            write_image(out / "overlays" / f"{ids[k]}.ppm", overlay(raw[k], heat.plane))
    write_detections(out / "detections.csv", records)
    summary = InferSummary(len(ids), len(pos), det.forward_count, seg.forward_count, cls.forward_count if len(pos) else 0)
    write_metrics(out / "infer_summary.csv", summary.rows())
    log.info("infer: %d frames, %d classified bleeding", summary.frames, summary.bleeding)
    return summary


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate_predictions(m: Manifest, ids: list[str], pred_dir: Path) -> list[tuple[str, float]]:
    verdicts = read_verdicts(pred_dir / "verdicts.csv")
    missing = [i for i in ids if i not in verdicts]
    if missing:
        raise DataError(f"no verdict for {len(missing)} frame(s): {', '.join(missing[:20])}")
    report = classification_metrics([verdicts[i].pred_class for i in ids], [m.frames[i].label for i in ids])
    wanted = set(ids)
    records = [r for r in read_detections(pred_dir / "detections.csv") if r.image_id in wanted]
    ap = ap_range(records, gt_boxes_xyxy(m, ids))
    dice, iou = [], []
    for iid in ids:
        if m.frames[iid].label != 1:
            continue
        try:
            gt = read_mask(m.mask_path(iid))
            p = pred_dir / "masks" / f"{iid}.pgm"
            pred = read_mask(p) if p.is_file() else np.zeros_like(gt)
        except (OSError, NetpbmError) as exc:
            raise DataError(f"{iid}: {exc}") from exc
        dice.append(dice_coefficient(pred, gt))
        iou.append(mask_iou(pred, gt))
    return [
        ("frames", float(len(ids))),
        ("accuracy", report.accuracy),
        ("precision", report.precision),
        ("recall", report.recall),
        ("f1", report.f1),
        ("ap50", ap.ap50),
        ("ap50_95", ap.ap50_95),
        ("dice", float(np.mean(dice)) if dice else float("nan")),
        ("iou", float(np.mean(iou)) if iou else float("nan")),
    ]


def _report(title: str, metrics: list[tuple[str, float]]) -> str:
    width = max(len(k) for k, _ in metrics)
    return title + "\n" + "".join(f"  {k:<{width}}  {v:.6f}\n" for k, v in metrics)


def cmd_eval(cfg: RunConfig) -> list[tuple[str, float]]:
    m = _manifest(cfg)
    pred = _existing(cfg, "predictions")
    split = str(cfg["split"])
    ids = m.ids(None if split == "all" else split)
    metrics = evaluate_predictions(m, ids, pred)
    out = _out_dir(cfg)
    write_metrics(out / "metrics.csv", metrics)
    (out / "report.txt").write_text(_report(f"evaluation on split '{split}' of {m.root.name}", metrics))
    return metrics


def cmd_ablation_study(cfg: RunConfig) -> list[tuple[str, float]]:
    """Train the classifier on raw and on preprocessed frames with the same seeds; report val accuracy."""
    m = _manifest(cfg)
    if read_preprocess_marker(m.root) is not None:
        raise DataError(f"{m.root} is already preprocessed; the ablation needs raw frames")
    pcfg = cfg.section("preprocess")
    train, val = load_split(m, "train"), load_split(m, "val")
    if not train or not val:
        raise DataError("the ablation study needs non-empty train and val splits")

    def prep(samples):
        return [LabeledSample(preprocess(s.image, pcfg), s.class_probs, s.boxes, s.mask, s.image_id) for s in samples]

    arms = {"raw": (train, val), "preprocessed": (prep(train), prep(val))}
    per_seed: dict[str, list[float]] = {k: [] for k in arms}
    for seed in cfg["ablation_seeds"]:
        for name, (tr, va) in arms.items():
            model, _ = fit_classifier(cfg, tr, va, seed)
            acc = evaluate_accuracy(model, _stack(va), np.array([s.label for s in va]))
            per_seed[name].append(acc)
            log.info("ablation seed %d %s: val accuracy %.4f", seed, name, acc)
    raw_acc = float(np.mean(per_seed["raw"]))
    pre_acc = float(np.mean(per_seed["preprocessed"]))
    metrics = [("accuracy_raw", raw_acc), ("accuracy_preprocessed", pre_acc), ("delta", pre_acc - raw_acc)]
    out = _out_dir(cfg)
    write_metrics(out / "ablation.csv", metrics)
    lines = [f"  seed {s}: raw {r:.6f}  preprocessed {p:.6f}\n" for s, r, p in zip(cfg["ablation_seeds"], per_seed["raw"], per_seed["preprocessed"])]
    (out / "ablation_report.txt").write_text(_report("preprocessing ablation (val accuracy, mean over seeds)", metrics) + "".join(lines))
    return metrics


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train-cls": cmd_train_cls,
    "train-det": cmd_train_det,
    "train-seg": cmd_train_seg,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablation-study": cmd_ablation_study,
}
