import filecmp
import shutil

import numpy as np
import pytest

from wcebleed import pipeline
from wcebleed.autograd import NumericError, load_checkpoint, save_checkpoint
from wcebleed.cli import main
from wcebleed.config import load_config, parse_config
from wcebleed.dataset import Verdict, read_manifest, read_metrics, read_verdicts, write_detections, write_verdicts
from wcebleed.imageops.netpbm import read_image, write_mask
from wcebleed.metrics import DetectionRecord, ap_range, classification_metrics
from wcebleed.models.detector import RTDETR
from wcebleed.models.segnet import SwinUNet
from wcebleed.models.swin import SwinClassifier

TINY = """
seed = 1
synth.num_bleeding = 6
synth.num_normal = 6
cls_model.embed_dim = 8
cls_model.num_heads = 1, 2
cls.epochs = 1
cls.batch_size = 4
det_model.hidden_dim = 16
det_model.num_heads = 2
det_model.ffn_dim = 16
det_model.num_decoder_layers = 1
det_model.num_queries = 4
det_model.backbone_channels = 4, 4, 8, 8, 16
det.epochs = 1
det.batch_size = 4
seg_encoder.embed_dim = 8
seg_encoder.depths = 1, 1, 1
seg_encoder.num_heads = 1, 2, 2
seg_model.stem_channels = 2
seg_model.decoder_channels = 8, 8, 4, 2, 2
seg.epochs = 1
seg.batch_size = 4
data = data
checkpoints = ckpt
input = data
predictions = pred
ablation_seeds = 0
"""


def write_cfg(root, extra="", base=TINY):
    p = root / "run.cfg"
    p.write_text(base + extra)
    return p


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A tiny dataset plus one checkpoint per model, trained for a single epoch."""
    root = tmp_path_factory.mktemp("run")
    cfg = write_cfg(root)
    assert main(["synth", "--config", str(cfg), "--out", str(root / "data"), "-q"]) == 0
    for cmd in ("train-cls", "train-det", "train-seg"):
        assert main([cmd, "--config", str(cfg), "--out", str(root / "ckpt"), "-q"]) == 0
    return root


def copy_run(trained, tmp_path):
    for name in ("data", "ckpt", "run.cfg"):
        src = trained / name
        (shutil.copytree if src.is_dir() else shutil.copy)(src, tmp_path / name)
    return tmp_path / "run.cfg"


def rig_classifier(ckpt_dir, bleeding: bool):
    path = ckpt_dir / "classifier.ckpt"
    params, hyper = load_checkpoint(path)
    params["head.bias"][:] = [-50, 50] if bleeding else [50, -50]
    save_checkpoint(path, params, hyper)


# --- exit codes ----------------------------------------------------------


def test_unknown_key_exits_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "cls.epoch = 3\n")
    assert main(["train-cls", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "unknown key 'cls.epoch'" in err and "cls.epochs" in err


def test_missing_data_path_names_key(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["train-cls", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "data = data" in capsys.readouterr().err


def test_missing_required_key(tmp_path, capsys):
    cfg = write_cfg(tmp_path, base="seed = 0\n")
    assert main(["synth", "--config", str(cfg)]) == 2
    assert "missing required key 'out'" in capsys.readouterr().err


def test_usage_error_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train-cls"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["fly", "--config", "x"])
    assert e.value.code == 2


def test_bad_dataset_exits_3(trained, tmp_path, capsys):
    cfg = copy_run(trained, tmp_path)
    ann = tmp_path / "data" / "annotations.csv"
    ann.write_text(ann.read_text().replace("bleeding", "blood", 1))
    assert main(["train-cls", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert "class must be one of" in capsys.readouterr().err


def test_numeric_failure_exits_4(trained, tmp_path, monkeypatch):
    cfg = copy_run(trained, tmp_path)

    def boom(*a, **k):
        raise NumericError("loss is nan")

    monkeypatch.setattr(pipeline, "train_classifier", boom)
    assert main(["train-cls", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 4


def test_wrong_checkpoint_kind_exits_2(trained, tmp_path, capsys):
    cfg = copy_run(trained, tmp_path)
    shutil.copy(tmp_path / "ckpt" / "detector.ckpt", tmp_path / "ckpt" / "classifier.ckpt")
    assert main(["infer", "--config", str(cfg), "--out", str(tmp_path / "p")]) == 2
    assert "expected a swin-classifier checkpoint" in capsys.readouterr().err


# --- data commands -------------------------------------------------------


def test_synth_deterministic_and_seed_override(tmp_path):
    cfg = write_cfg(tmp_path)
    for d in ("a", "b"):
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / d), "-q"]) == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    assert all(not filecmp.dircmp(tmp_path / "a" / s, tmp_path / "b" / s).diff_files for s in ("images", "masks"))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "c"), "--seed", "2", "-q"]) == 0
    assert (tmp_path / "a" / "images" / "frame_00000.ppm").read_bytes() != (tmp_path / "c" / "images" / "frame_00000.ppm").read_bytes()


def test_preprocess_copies_annotations(trained, tmp_path):
    cfg = copy_run(trained, tmp_path)
    assert main(["preprocess", "--config", str(cfg), "--out", str(tmp_path / "prep"), "-q"]) == 0
    src, dst = tmp_path / "data", tmp_path / "prep"
    assert (src / "annotations.csv").read_bytes() == (dst / "annotations.csv").read_bytes()
    assert (src / "splits.csv").read_bytes() == (dst / "splits.csv").read_bytes()
    assert len(list((dst / "images").glob("*.ppm"))) == len(list((src / "images").glob("*.ppm")))
    assert read_manifest(dst).frames == read_manifest(src).frames
    assert pipeline.read_preprocess_marker(dst) == parse_config("").section("preprocess")
    # a preprocessed dataset is not preprocessed twice
    cfg.write_text(cfg.read_text().replace("data = data", "data = prep"))
    assert main(["preprocess", "--config", str(cfg), "--out", str(tmp_path / "prep2"), "-q"]) == 3


def test_preprocess_aggregates_io_errors(trained, tmp_path, capsys):
    cfg = copy_run(trained, tmp_path)
    for name in ("frame_00000", "frame_00003"):
        (tmp_path / "data" / "images" / f"{name}.ppm").write_bytes(b"P6\n4 4\n255\n")
    assert main(["preprocess", "--config", str(cfg), "--out", str(tmp_path / "prep"), "-q"]) == 3
    err = capsys.readouterr().err
    assert "2 frame(s)" in err and "frame_00000" in err and "frame_00003" in err


# --- training ------------------------------------------------------------


def test_train_logs_and_checkpoints(trained):
    ck = trained / "ckpt"
    for log_name, epochs in (("classifier_log.csv", 1), ("detector_log.csv", 1), ("segmenter_log.csv", 1)):
        assert len((ck / log_name).read_text().splitlines()) == epochs + 1
    _, hyper = load_checkpoint(ck / "classifier.ckpt")
    assert hyper["model"] == "swin-classifier" and hyper["preprocess"] is None
    model, _ = pipeline.load_model(ck / "classifier.ckpt", "swin-classifier")
    assert isinstance(model, SwinClassifier) and model.cfg.embed_dim == 8


def test_train_rerun_is_bit_identical(trained, tmp_path):
    cfg = copy_run(trained, tmp_path)
    assert main(["train-cls", "--config", str(cfg), "--out", str(tmp_path / "again"), "-q"]) == 0
    for name in ("classifier.ckpt", "classifier_log.csv"):
        assert (tmp_path / "again" / name).read_bytes() == (trained / "ckpt" / name).read_bytes()


def test_checkpoint_records_preprocessing(trained, tmp_path):
    cfg = copy_run(trained, tmp_path)
    main(["preprocess", "--config", str(cfg), "--out", str(tmp_path / "prep"), "-q"])
    cfg.write_text(cfg.read_text().replace("data = data", "data = prep"))
    assert main(["train-cls", "--config", str(cfg), "--out", str(tmp_path / "c2"), "-q"]) == 0
    _, hyper = load_checkpoint(tmp_path / "c2" / "classifier.ckpt")
    assert hyper["preprocess"]["clahe_tiles"] == [8, 8]


# --- inference -----------------------------------------------------------


def test_infer_gating_all_negative(trained, tmp_path):
    cfg = copy_run(trained, tmp_path)
    rig_classifier(tmp_path / "ckpt", bleeding=False)
    assert main(["infer", "--config", str(cfg), "--out", str(tmp_path / "p"), "-q"]) == 0
    summary = read_metrics(tmp_path / "p" / "infer_summary.csv")
    assert summary["frames"] == 12 and summary["bleeding"] == 0
    assert summary["detector_forwards"] == 0 and summary["segmenter_forwards"] == 0 and summary["cam_forwards"] == 0
    assert (tmp_path / "p" / "detections.csv").read_text() == "image_id,score,x_min,y_min,x_max,y_max\n"
    assert not any((tmp_path / "p" / "masks").iterdir()) and not any((tmp_path / "p" / "overlays").iterdir())


def test_infer_gating_mixed(trained, tmp_path, monkeypatch):
    cfg = copy_run(trained, tmp_path)
    # classifier verdict = parity of the frame's first pixel; record what the later stages see
    monkeypatch.setattr(SwinClassifier, "predict_proba", lambda self, x, batch_size=64: np.stack([1 - x[:, 0, 0, 0] % 2, x[:, 0, 0, 0] % 2], 1).astype(float))
    seen = {"det": [], "seg": []}
    det_forward, seg_forward = RTDETR.forward, SwinUNet.forward
    monkeypatch.setattr(RTDETR, "forward", lambda self, x: (seen["det"].append(np.array(x)), det_forward(self, x))[1])
    monkeypatch.setattr(SwinUNet, "forward", lambda self, x: (seen["seg"].append(np.array(x)), seg_forward(self, x))[1])
    summary = pipeline.cmd_infer(_load(cfg, tmp_path / "p"))
    images = {p.stem: read_image(p) for p in sorted((tmp_path / "data" / "images").glob("*.ppm"))}
    positive = sorted(i for i, img in images.items() if img[0, 0, 0] % 2)
    assert 0 < len(positive) < len(images)
    assert summary.bleeding == len(positive)
    for stage in ("det", "seg"):
        frames = np.concatenate(seen[stage])
        assert len(frames) == len(positive)
        assert all(np.array_equal(f, images[i]) for f, i in zip(frames, positive))
    verdicts = read_verdicts(tmp_path / "p" / "verdicts.csv")
    assert sorted(i for i, v in verdicts.items() if v.pred_class == 1) == positive
    for sub, ext in (("masks", "pgm"), ("overlays", "ppm"), ("heatmaps", "pgm")):
        assert sorted(p.stem for p in (tmp_path / "p" / sub).glob(f"*.{ext}")) == positive
    k = trained_channels(tmp_path)
    assert summary.cam_forwards == len(positive) * (k + 1)


def _load(cfg_path, out):
    cfg = load_config(cfg_path)
    cfg.set("out", str(out))
    return cfg


def trained_channels(root):
    model, _ = pipeline.load_model(root / "ckpt" / "classifier.ckpt", "swin-classifier")
    return model.cfg.stage_dim(len(model.cfg.depths) - 1)


def test_infer_all_bleeding_artifacts_and_determinism(trained, tmp_path):
    cfg = copy_run(trained, tmp_path)
    rig_classifier(tmp_path / "ckpt", bleeding=True)
    for d in ("p1", "p2"):
        assert main(["infer", "--config", str(cfg), "--out", str(tmp_path / d), "-q"]) == 0
    for sub in ("", "masks", "overlays", "heatmaps"):
        cmp = filecmp.dircmp(tmp_path / "p1" / sub, tmp_path / "p2" / sub)
        assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    ids = sorted(p.stem for p in (tmp_path / "data" / "images").glob("*.ppm"))
    for i in ids:
        assert (tmp_path / "p1" / "masks" / f"{i}.pgm").is_file()
        assert (tmp_path / "p1" / "overlays" / f"{i}.ppm").is_file()
    header = (tmp_path / "p1" / "verdicts.csv").read_text().splitlines()[0]
    assert header == "image_id,pred_class,prob_bleeding"


def test_infer_single_file(trained, tmp_path):
    cfg = copy_run(trained, tmp_path)
    rig_classifier(tmp_path / "ckpt", bleeding=True)
    cfg.write_text(cfg.read_text().replace("input = data", "input = data/images/frame_00002.ppm"))
    assert main(["infer", "--config", str(cfg), "--out", str(tmp_path / "p"), "-q"]) == 0
    assert list(read_verdicts(tmp_path / "p" / "verdicts.csv")) == ["frame_00002"]


# --- evaluation ----------------------------------------------------------


def oracle_predictions(data, out, boxes=True):
    m = read_manifest(data)
    (out / "masks").mkdir(parents=True)
    write_verdicts(out / "verdicts.csv", [Verdict(i, e.label, float(e.label)) for i, e in sorted(m.frames.items())])
    recs = []
    for i, e in sorted(m.frames.items()):
        if e.label == 1:
            shutil.copy(m.mask_path(i), out / "masks" / f"{i}.pgm")
            if boxes:
                recs += [DetectionRecord(i, 0.9, tuple(float(v) for v in b)) for b in e.boxes]
    write_detections(out / "detections.csv", recs)
    return m


def test_eval_perfect_predictions(trained, tmp_path):
    cfg = copy_run(trained, tmp_path)
    oracle_predictions(tmp_path / "data", tmp_path / "pred")
    cfg.write_text(cfg.read_text() + "split = all\n")
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "ev"), "-q"]) == 0
    metrics = read_metrics(tmp_path / "ev" / "metrics.csv")
    for k in ("accuracy", "precision", "recall", "f1", "ap50", "ap50_95", "dice", "iou"):
        assert metrics[k] == 1.0, k
    report = (tmp_path / "ev" / "report.txt").read_text()
    for k in ("accuracy", "f1", "ap50", "ap50_95", "dice", "iou"):
        assert f"  {k} " in report


def test_eval_no_detections_gives_zero_ap(trained, tmp_path):
    cfg = copy_run(trained, tmp_path)
    oracle_predictions(tmp_path / "data", tmp_path / "pred", boxes=False)
    cfg.write_text(cfg.read_text() + "split = all\n")
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "ev"), "-q"]) == 0
    metrics = read_metrics(tmp_path / "ev" / "metrics.csv")
    assert metrics["ap50"] == 0.0 and metrics["ap50_95"] == 0.0 and metrics["accuracy"] == 1.0


def test_eval_matches_library_calls(trained, tmp_path):
    cfg = copy_run(trained, tmp_path)
    m = oracle_predictions(tmp_path / "data", tmp_path / "pred")
    rng = np.random.default_rng(0)
    ids = m.ids("train")
    verdicts = [Verdict(i, int(rng.integers(2)), 0.5) for i in sorted(m.frames)]
    write_verdicts(tmp_path / "pred" / "verdicts.csv", verdicts)
    recs = [DetectionRecord(i, float(rng.uniform()), (4.0, 4.0, 30.0, 30.0)) for i in sorted(m.frames)]
    write_detections(tmp_path / "pred" / "detections.csv", recs)
    for i in ids:
        if m.frames[i].label == 1:
            write_mask(tmp_path / "pred" / "masks" / f"{i}.pgm", (rng.uniform(size=(64, 64)) > 0.5).astype(np.uint8))
    cfg.write_text(cfg.read_text() + "split = train\n")
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "ev"), "-q"]) == 0
    got = read_metrics(tmp_path / "ev" / "metrics.csv")
    direct = dict(pipeline.evaluate_predictions(m, ids, tmp_path / "pred"))
    vmap = {v.image_id: v for v in verdicts}
    rep = classification_metrics([vmap[i].pred_class for i in ids], [m.frames[i].label for i in ids])
    ap = ap_range([r for r in recs if r.image_id in ids], {i: np.array(m.frames[i].boxes, float).reshape(-1, 4) for i in ids})
    assert got["accuracy"] == pytest.approx(rep.accuracy, abs=1e-6) and got["f1"] == pytest.approx(rep.f1, abs=1e-6)
    assert got["ap50"] == pytest.approx(ap.ap50, abs=1e-6) and got["ap50_95"] == pytest.approx(ap.ap50_95, abs=1e-6)
    for k, v in direct.items():
        assert got[k] == pytest.approx(v, abs=1e-6)


def test_eval_missing_predictions_listed(trained, tmp_path, capsys):
    cfg = copy_run(trained, tmp_path)
    m = oracle_predictions(tmp_path / "data", tmp_path / "pred")
    ids = m.ids("val")
    write_verdicts(tmp_path / "pred" / "verdicts.csv", [])
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "ev"), "-q"]) == 3
    err = capsys.readouterr().err
    assert all(i in err for i in ids)


# --- ablation ------------------------------------------------------------


def test_ablation_study_report(trained, tmp_path):
    cfg = copy_run(trained, tmp_path)
    assert main(["ablation-study", "--config", str(cfg), "--out", str(tmp_path / "ab"), "-q"]) == 0
    lines = (tmp_path / "ab" / "ablation.csv").read_text().splitlines()
    assert [l.split(",")[0] for l in lines] == ["metric", "accuracy_raw", "accuracy_preprocessed", "delta"]
    vals = read_metrics(tmp_path / "ab" / "ablation.csv")
    assert vals["delta"] == pytest.approx(vals["accuracy_preprocessed"] - vals["accuracy_raw"], abs=2e-6)
