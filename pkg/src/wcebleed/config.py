"""Flat ``key = value`` run configuration.

Keys are either top-level (``seed``, ``data``, ...) or ``section.field`` where
the section maps onto one of the library's config dataclasses, e.g.
``cls.epochs = 15`` or ``det_model.num_queries = 10``. Values are typed from
the dataclass annotations. ``#`` starts a comment. Unknown or repeated keys are
errors that name the offending line.
"""

from __future__ import annotations

import dataclasses
import difflib
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .imageops.augment import AugmentConfig
from .imageops.preprocess import PreprocessConfig
from .models.det_loss import LossWeights
from .models.detector import DetectorConfig, DetectorTrainConfig
from .models.segnet import SegConfig, SegmenterTrainConfig
from .models.swin import ClassifierTrainConfig, SwinConfig
from .synth import SyntheticSpec


class ConfigError(Exception):
    """Invalid configuration file or value."""


# section prefix -> (dataclass, fields that are set elsewhere and not exposed)
SECTIONS: dict[str, tuple[type, frozenset[str]]] = {
    "synth": (SyntheticSpec, frozenset({"seed"})),
    "preprocess": (PreprocessConfig, frozenset()),
    "augment": (AugmentConfig, frozenset({"seed"})),
    "cls_model": (SwinConfig, frozenset()),
    "cls": (ClassifierTrainConfig, frozenset({"seed", "extra"})),
    "det_model": (DetectorConfig, frozenset()),
    "det": (DetectorTrainConfig, frozenset({"seed", "weights"})),
    "det_loss": (LossWeights, frozenset()),
    "seg_encoder": (SwinConfig, frozenset()),
    "seg_model": (SegConfig, frozenset({"encoder"})),
    "seg": (SegmenterTrainConfig, frozenset({"seed", "extra"})),
}

TOP_LEVEL: dict[str, type] = {
    "seed": int,
    "data": str,
    "out": str,
    "input": str,
    "checkpoints": str,
    "predictions": str,
    "split": str,
    "split_fractions": tuple[float, float, float],
    "cam_layer": str,
    "cam_class": int,
    "mask_threshold": float,
    "bleeding_threshold": float,
    "det_score_threshold": float,
    "ablation_seeds": tuple[int, ...],
}
DEFAULTS: dict[str, object] = {
    "seed": 0,
    "split": "val",
    "split_fractions": (0.7, 0.15, 0.15),
    "cam_layer": "",
    "cam_class": 1,
    "mask_threshold": 0.5,
    "bleeding_threshold": 0.5,
    "det_score_threshold": 0.05,
    "ablation_seeds": (0,),
}
_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _field_types(cls: type) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def known_keys() -> list[str]:
    keys = list(TOP_LEVEL)
    for prefix, (cls, hidden) in SECTIONS.items():
        keys += [f"{prefix}.{name}" for name in _field_types(cls) if name not in hidden]
    return keys


def _key_type(key: str):
    if key in TOP_LEVEL:
        return TOP_LEVEL[key]
    prefix, _, name = key.partition(".")
    if prefix in SECTIONS and name:
        cls, hidden = SECTIONS[prefix]
        types = _field_types(cls)
        if name in types and name not in hidden:
            return types[name]
    return None


def parse_value(text: str, tp) -> object:
    """Convert ``text`` to ``tp`` (int, float, bool, str or tuple thereof)."""
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(parse_value(p, args[0]) for p in parts)
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values, got {len(parts)}")
        return tuple(parse_value(p, a) for p, a in zip(parts, args))
    if tp is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    if tp is str:
        return text
    raise ValueError(f"unsupported type {tp}")


@dataclass
class RunConfig:
    values: dict[str, object] = field(default_factory=dict)
    lines: dict[str, int] = field(default_factory=dict)
    source: str = "<memory>"
    base_dir: Path = field(default_factory=Path.cwd)

    def __getitem__(self, key: str):
        if key in self.values:
            return self.values[key]
        if key in DEFAULTS:
            return DEFAULTS[key]
        raise ConfigError(f"{self.source}: missing required key {key!r}")

    def get(self, key: str, default=None):
        try:
            return self[key]
        except ConfigError:
            return default

    def path(self, key: str) -> Path:
        p = Path(str(self[key]))
        return p if p.is_absolute() else self.base_dir / p

    def set(self, key: str, value) -> None:
        if _key_type(key) is None:
            raise ConfigError(f"unknown key {key!r}")
        self.values[key] = value

    @property
    def seed(self) -> int:
        return int(self["seed"])

    def section(self, prefix: str, **fixed):
        """Build the dataclass for ``prefix`` from its defaults and any overrides."""
        cls, _ = SECTIONS[prefix]
        kw = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith(prefix + ".")}
        kw.update(fixed)
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            where = ", ".join(f"line {self.lines[k]}" for k in sorted(self.values) if k.startswith(prefix + ".") and k in self.lines)
            raise ConfigError(f"{self.source}: invalid [{prefix}] settings ({where or 'defaults'}): {exc}") from exc

    # builders for the composite configs
    def seg_config(self) -> SegConfig:
        return self.section("seg_model", encoder=self.section("seg_encoder", **_seg_encoder_defaults(self)))

    def det_train_config(self) -> DetectorTrainConfig:
        return self.section("det", seed=self.seed, weights=self.section("det_loss"))


def _seg_encoder_defaults(cfg: RunConfig) -> dict:
    # the segmenter's encoder is one stage deeper than the classifier default
    enc = SegConfig().encoder
    out = {}
    for name in ("depths", "num_heads"):
        if f"seg_encoder.{name}" not in cfg.values:
            out[name] = getattr(enc, name)
    return out


def parse_config(text: str, source: str = "<string>", base_dir: str | os.PathLike | None = None) -> RunConfig:
    cfg = RunConfig(source=source, base_dir=Path(base_dir) if base_dir is not None else Path.cwd())
    known = known_keys()
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        tp = _key_type(key)
        if tp is None:
            hint = difflib.get_close_matches(key, known, n=1)
            suffix = f" (did you mean {hint[0]!r}?)" if hint else ""
            raise ConfigError(f"{source}:{n}: unknown key {key!r}{suffix}")
        if key in cfg.lines:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r} (first set on line {cfg.lines[key]})")
        if value == "":
            raise ConfigError(f"{source}:{n}: empty value for {key!r}")
        try:
            cfg.values[key] = parse_value(value, tp)
        except ValueError as exc:
            raise ConfigError(f"{source}:{n}: bad value for {key!r}: {exc}") from None
        cfg.lines[key] = n
    return cfg


def load_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path), path.parent)


def dump_config(cfg: RunConfig) -> str:
    """Serialize back to the flat format (sorted keys)."""
    lines = []
    for k in sorted(cfg.values):
        v = cfg.values[k]
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
