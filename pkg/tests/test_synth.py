import numpy as np
import pytest

from wcebleed.synth import SyntheticSpec, ellipse_mask, frame_labels, generate, mask_box, render_frame, split_ids, stack_samples


def test_normal_frame_has_no_annotations():
    s = render_frame(SyntheticSpec(), 3, bleeding=False)
    assert s.label == 0 and s.boxes == [] and not s.mask.any()


def test_bleeding_frame_boxes_match_mask():
    spec = SyntheticSpec(corrupt=True)
    for i in range(20):
        s = render_frame(spec, i, bleeding=True)
        assert s.label == 1 and 1 <= len(s.boxes) <= 2
        assert s.mask.any()
        # boxes are the pixel bounding boxes of the rendered ellipses, exactly
        covered = np.zeros_like(s.mask, dtype=bool)
        for b in s.boxes:
            x0, y0, x1, y1 = (int(round(v)) for v in b.to_xyxy(64, 64))
            sub = s.mask[y0:y1, x0:x1]
            assert sub[0].any() and sub[-1].any() and sub[:, 0].any() and sub[:, -1].any()
            covered[y0:y1, x0:x1] = True
        assert not (s.mask.astype(bool) & ~covered).any()


def test_single_blob_box_equals_mask_box():
    spec = SyntheticSpec(blob_count=(1, 1))
    for i in range(10):
        s = render_frame(spec, i, True)
        expected = mask_box(s.mask)
        assert np.allclose(s.boxes[0].to_xyxy(64, 64), expected)


def test_same_seed_bit_identical():
    spec = SyntheticSpec(num_bleeding=5, num_normal=5, corrupt=True, seed=9)
    a, b = generate(spec), generate(spec)
    for x, y in zip(a, b):
        assert x.image_id == y.image_id
        assert np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask)


def test_different_seed_differs():
    a = render_frame(SyntheticSpec(seed=1), 0, True).image
    b = render_frame(SyntheticSpec(seed=2), 0, True).image
    assert not np.array_equal(a, b)


def test_frame_independent_of_dataset_size():
    small = generate(SyntheticSpec(num_bleeding=2, num_normal=2, seed=4))
    frame = render_frame(SyntheticSpec(seed=4), 1, bool(small[1].label))
    assert np.array_equal(frame.image, small[1].image)


def test_labels_counts_and_stack():
    spec = SyntheticSpec(num_bleeding=7, num_normal=5)
    assert frame_labels(spec).sum() == 7 and len(frame_labels(spec)) == 12
    x, y = stack_samples(generate(spec))
    assert x.shape == (12, 64, 64, 3) and x.dtype == np.uint8
    assert y.sum() == 7


def test_bleeding_pixels_are_red():
    s = render_frame(SyntheticSpec(), 0, True)
    blob = s.image[s.mask.astype(bool)].astype(float)
    assert blob[:, 0].mean() > 2 * blob[:, 1:].mean()


def test_corruption_lowers_contrast():
    clean = render_frame(SyntheticSpec(), 0, True).image.astype(float)
    dirty = render_frame(SyntheticSpec(corrupt=True), 0, True).image.astype(float)
    assert dirty[..., 0].std() < clean[..., 0].std()


def test_ellipse_mask_axis_aligned():
    m = ellipse_mask(16, 8, 8, 4, 2, 0.0)
    ys, xs = np.nonzero(m)
    assert xs.min() == 4 and xs.max() == 11
    assert ys.min() == 6 and ys.max() == 9


@pytest.mark.parametrize(
    "kwargs",
    [
        {"image_size": 48},
        {"num_bleeding": -1},
        {"blob_axes": (10, 4)},
        {"blob_axes": (4, 40)},
        {"shading": 1.0},
        {"decoy_pattern": "stripes"},
        {"contrast_range": (0.0, 0.5)},
    ],
)
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        SyntheticSpec(**kwargs)


def test_split_ids():
    ids = [f"frame_{i:05d}" for i in range(100)]
    sp = split_ids(ids, seed=0)
    assert [len(sp[k]) for k in ("train", "val", "test")] == [70, 15, 15]
    assert sorted(sp["train"] + sp["val"] + sp["test"]) == ids
    assert sp == split_ids(ids, seed=0)
    assert sp != split_ids(ids, seed=1)
    with pytest.raises(ValueError):
        split_ids(ids, 0, (0.5, 0.2, 0.2))
