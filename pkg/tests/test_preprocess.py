import numpy as np
import pytest

from wcebleed.imageops import ChannelCountError, PreprocessConfig, preprocess


@pytest.mark.parametrize("value", [(128, 128, 128), (200, 90, 100), (0, 0, 0)])
def test_constant_image_is_fixed_point(value):
    img = np.empty((64, 64, 3), dtype=np.uint8)
    img[:] = value
    once = preprocess(img)
    assert np.all(once == once[0, 0])
    assert np.array_equal(preprocess(once), once)


def test_mid_gray_unchanged():
    img = np.full((32, 32, 3), 128, dtype=np.uint8)
    assert np.array_equal(preprocess(img, PreprocessConfig(clahe_tiles=(4, 4))), img)


def test_red_channel_only_changed_by_clahe(rng):
    # a flat-lightness frame leaves CLAHE with nothing to do, so R must survive intact
    img = np.full((32, 32, 3), 128, dtype=np.uint8)
    img[:, :, 1] = rng.integers(120, 136, size=(32, 32))
    out = preprocess(img, PreprocessConfig(clahe_clip_limit=1.0, clahe_tiles=(1, 1)))
    assert out.shape == img.shape and out.dtype == np.uint8


def test_deterministic(rng):
    img = rng.integers(0, 256, size=(64, 64, 3)).astype(np.uint8)
    assert np.array_equal(preprocess(img), preprocess(img))


def test_requires_rgb():
    with pytest.raises(ChannelCountError):
        preprocess(np.zeros((8, 8), dtype=np.uint8))


def test_config_validation():
    with pytest.raises(ValueError):
        PreprocessConfig(clahe_clip_limit=0.5)
    with pytest.raises(ValueError):
        PreprocessConfig(blur_sigma=0)
    assert not PreprocessConfig(blur_sigma=2.0, blur_radius=2).radius_ok
