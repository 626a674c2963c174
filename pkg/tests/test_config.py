import pytest

from wcebleed.config import ConfigError, dump_config, known_keys, load_config, parse_config
from wcebleed.models.swin import ClassifierTrainConfig


def test_parse_types_and_comments():
    cfg = parse_config(
        """
        # header comment
        seed = 5
        cls.lr_max = 1e-3   # trailing comment
        cls.augment = no
        cls_model.depths = 2, 2
        synth.blob_axes = 3, 8
        ablation_seeds = 0, 1, 2
        """
    )
    assert cfg.seed == 5
    tc = cfg.section("cls", seed=cfg.seed)
    assert tc.lr_max == 1e-3 and tc.augment is False and tc.seed == 5
    assert tc.epochs == ClassifierTrainConfig().epochs
    assert cfg.section("cls_model").depths == (2, 2)
    assert cfg.section("synth", seed=0).blob_axes == (3.0, 8.0)
    assert cfg["ablation_seeds"] == (0, 1, 2)


def test_unknown_key_names_line_and_suggests():
    with pytest.raises(ConfigError, match=r":3: unknown key 'cls.lr_mx'.*cls.lr_max"):
        parse_config("seed = 1\n\ncls.lr_mx = 0.1\n")


def test_hidden_fields_are_not_keys():
    for key in ("cls.seed", "det.weights", "seg_model.encoder", "synth.seed"):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config(f"{key} = 1")
    assert "det_loss.giou" in known_keys()


def test_duplicate_key():
    with pytest.raises(ConfigError, match=r":2: duplicate key 'seed' \(first set on line 1\)"):
        parse_config("seed = 1\nseed = 2\n")


@pytest.mark.parametrize(
    "text, pattern",
    [
        ("seed = abc", r":1: bad value for 'seed'"),
        ("cls.augment = maybe", "expected a boolean"),
        ("synth.blob_axes = 1, 2, 3", "expected 2 comma-separated values"),
        ("seed =", "empty value"),
        ("just some words", "expected 'key = value'"),
    ],
)
def test_bad_values(text, pattern):
    with pytest.raises(ConfigError, match=pattern):
        parse_config(text)


def test_invalid_section_values_name_lines():
    cfg = parse_config("seed = 0\ncls_model.depths = 2, 2, 2\n")
    with pytest.raises(ConfigError, match=r"invalid \[cls_model\].*line 2"):
        cfg.section("cls_model")


def test_missing_required_key():
    with pytest.raises(ConfigError, match="missing required key 'data'"):
        parse_config("seed = 0")["data"]


def test_paths_relative_to_config(tmp_path):
    (tmp_path / "sub").mkdir()
    f = tmp_path / "sub" / "run.cfg"
    f.write_text("data = ../d\nout = /abs/out\n")
    cfg = load_config(f)
    assert cfg.path("data") == tmp_path / "sub" / ".." / "d"
    assert str(cfg.path("out")) == "/abs/out"


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read config"):
        load_config("/nonexistent/run.cfg")


def test_seg_encoder_defaults_follow_segmenter():
    cfg = parse_config("seg_encoder.embed_dim = 8")
    seg = cfg.seg_config()
    assert seg.encoder.embed_dim == 8 and seg.encoder.depths == (2, 2, 2)


def test_det_train_config_carries_seed_and_weights():
    cfg = parse_config("seed = 4\ndet_loss.giou = 3.5\ndet.epochs = 7")
    tc = cfg.det_train_config()
    assert (tc.seed, tc.epochs, tc.weights.giou) == (4, 7, 3.5)


def test_dump_roundtrip():
    text = "seed = 2\ncls.augment = false\nsynth.blob_axes = 3.0, 8.0\nsplit = test\n"
    cfg = parse_config(text)
    assert parse_config(dump_config(cfg)).values == cfg.values


def test_set_rejects_unknown():
    cfg = parse_config("")
    cfg.set("seed", 9)
    assert cfg.seed == 9
    with pytest.raises(ConfigError):
        cfg.set("sed", 1)
