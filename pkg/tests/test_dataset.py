import numpy as np
import pytest

from wcebleed.dataset import (
    DataError,
    Verdict,
    gt_boxes_xyxy,
    load_sample,
    load_split,
    read_detections,
    read_manifest,
    read_metrics,
    read_verdicts,
    write_dataset,
    write_detections,
    write_metrics,
    write_verdicts,
)
from wcebleed.metrics import DetectionRecord
from wcebleed.synth import SyntheticSpec, generate, split_ids


@pytest.fixture
def dataset(tmp_path):
    samples = generate(SyntheticSpec(num_bleeding=4, num_normal=3, seed=1))
    splits = split_ids([s.image_id for s in samples], 8)
    write_dataset(tmp_path, samples, splits)
    return tmp_path, samples, splits


def test_roundtrip(dataset):
    root, samples, splits = dataset
    m = read_manifest(root)
    assert set(m.frames) == {s.image_id for s in samples}
    assert m.splits == {k: sorted(v) for k, v in splits.items() if v}
    for s in samples:
        back = load_sample(m, s.image_id)
        assert np.array_equal(back.image, s.image)
        assert np.array_equal(back.mask, s.mask)
        assert back.label == s.label
        assert np.allclose(back.boxes_xyxy(), s.boxes_xyxy())
    assert len(load_split(m, "train")) == len(splits["train"])


def test_annotation_rows(dataset):
    root, samples, _ = dataset
    lines = (root / "annotations.csv").read_text().splitlines()
    assert lines[0] == "image_id,class,x_min,y_min,x_max,y_max"
    normal = [s.image_id for s in samples if s.label == 0]
    assert f"{normal[0]},none,,,," in lines
    assert sum(len(s.boxes) for s in samples) + len(normal) == len(lines) - 1


def test_gt_boxes(dataset):
    root, samples, _ = dataset
    m = read_manifest(root)
    gts = gt_boxes_xyxy(m, m.ids())
    for s in samples:
        assert gts[s.image_id].shape == (len(s.boxes), 4)


def _rewrite(root, name, old, new):
    p = root / name
    text = p.read_text()
    assert old in text
    p.write_text(text.replace(old, new, 1))


def test_rejects_bad_class(dataset):
    root, samples, _ = dataset
    _rewrite(root, "annotations.csv", ",none,", ",blood,")
    with pytest.raises(DataError, match="class must be one of"):
        read_manifest(root)


def test_rejects_box_on_none_row(dataset):
    root, _, _ = dataset
    _rewrite(root, "annotations.csv", ",none,,,,", ",none,1,1,4,4")
    with pytest.raises(DataError, match="carries a box"):
        read_manifest(root)


def test_rejects_degenerate_box(dataset):
    root, samples, _ = dataset
    s = next(s for s in samples if s.label == 1)
    x0, y0, x1, y1 = (int(round(v)) for v in s.boxes[0].to_xyxy(64, 64))
    _rewrite(root, "annotations.csv", f"{s.image_id},bleeding,{x0},{y0},{x1},{y1}", f"{s.image_id},bleeding,{x0},{y0},{x0},{y1}")
    with pytest.raises(DataError, match="invalid box"):
        read_manifest(root)


def test_rejects_missing_mask_and_extra_mask(dataset):
    root, samples, _ = dataset
    bleed = next(s.image_id for s in samples if s.label == 1)
    normal = next(s.image_id for s in samples if s.label == 0)
    (root / "masks" / f"{bleed}.pgm").rename(root / "masks" / f"{normal}.pgm")
    with pytest.raises(DataError) as err:
        read_manifest(root)
    assert f"{bleed}: bleeding frame without mask" in str(err.value)
    assert f"{normal}: non-bleeding frame has a mask" in str(err.value)


def test_rejects_missing_image(dataset):
    root, samples, _ = dataset
    (root / "images" / f"{samples[0].image_id}.ppm").unlink()
    with pytest.raises(DataError, match="missing image"):
        read_manifest(root)


def test_rejects_unknown_split_and_duplicates(dataset):
    root, _, splits = dataset
    first = splits["train"][0]
    with open(root / "splits.csv", "a") as fh:
        fh.write(f"{first},val\n")
    with pytest.raises(DataError, match="more than one split"):
        read_manifest(root)


def test_rejects_bad_header(dataset):
    root, _, _ = dataset
    _rewrite(root, "splits.csv", "image_id,split", "id,split")
    with pytest.raises(DataError, match="expected header"):
        read_manifest(root)


def test_missing_directory(tmp_path):
    with pytest.raises(DataError, match="does not exist"):
        read_manifest(tmp_path / "nope")


def test_prediction_files_roundtrip(tmp_path):
    recs = [DetectionRecord("a", 0.5, (1.0, 2.0, 3.5, 4.25)), DetectionRecord("b", 0.125, (0.0, 0.0, 64.0, 64.0))]
    write_detections(tmp_path / "d.csv", recs)
    assert read_detections(tmp_path / "d.csv") == recs
    vs = [Verdict("a", 1, 0.75), Verdict("b", 0, 0.25)]
    write_verdicts(tmp_path / "v.csv", vs)
    assert (tmp_path / "v.csv").read_text().splitlines()[1] == "a,bleeding,0.750000"
    assert list(read_verdicts(tmp_path / "v.csv").values()) == vs
    write_metrics(tmp_path / "m.csv", [("accuracy", 0.5), ("f1", 1.0)])
    assert read_metrics(tmp_path / "m.csv") == {"accuracy": 0.5, "f1": 1.0}


def test_verdicts_reject_bad_class(tmp_path):
    (tmp_path / "v.csv").write_text("image_id,pred_class,prob_bleeding\na,maybe,0.5\n")
    with pytest.raises(DataError, match="pred_class"):
        read_verdicts(tmp_path / "v.csv")
