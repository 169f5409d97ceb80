"""``key = value`` run configuration.

One setting per line; ``#`` starts a comment. Keys are namespaced by stage::

    data.dir = runs/synth          # folder holding series.csv and texts.jsonl
    model.patch_len = 8
    train.steps = 500
    eval.horizons = 8, 16, 24

Lists are comma separated, booleans are ``true``/``false``, and ``none``
clears an optional value. ``KEYS`` lists every accepted key.
"""
import dataclasses
from pathlib import Path

from .data_io import SyntheticSpec
from .model import ModelConfig
from .trainer import TrainConfig
from .ts_encoder import PretrainConfig


class ConfigError(ValueError):
    pass


def _bool(raw):
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _list(conv):
    def parse(raw):
        return tuple(conv(p.strip()) for p in raw.split(",") if p.strip())
    return parse


def _opt(conv):
    def parse(raw):
        return None if raw.strip().lower() == "none" else conv(raw)
    return parse


def _conv_for(default, name):
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return _list(float) if default and isinstance(default[0], float) else _list(str)
    return _OPTIONAL.get(name, str)


_OPTIONAL = {
    "model.ablation": _opt(str),
    "model.backbone_weights": _opt(str),
    "train.steps": _opt(int),
    "train.stride": _opt(int),
}


def _section(prefix, cls):
    out = {}
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        key = f"{prefix}.{f.name}"
        out[key] = _OPTIONAL.get(key) or _conv_for(default, key)
    return out


KEYS = {
    "seed": int,
    "data.dir": str,
    "data.series": str,
    "data.texts": _opt(str),
    "data.splits": _list(float),
    "vocab.min_freq": int,
    "encoder.path": _opt(str),
    "eval.horizons": _list(int),
    "eval.stride": _opt(int),
    "eval.split": str,
    "eval.season": int,
    "eval.quantiles": _list(float),
    "forecast.at": _opt(int),
}
KEYS.update(_section("model", ModelConfig))
KEYS.update(_section("train", TrainConfig))
KEYS.update(_section("pretrain", PretrainConfig))
KEYS.update(_section("synth", SyntheticSpec))
KEYS["synth.regimes"] = _list(str)

DEFAULTS = {
    "seed": 0,
    "data.splits": (0.7, 0.1, 0.2),
    "vocab.min_freq": 1,
    "eval.split": "test",
    "eval.season": 1,
    "eval.quantiles": (0.1, 0.5, 0.9),
}


def parse_lines(lines, origin="<config>"):
    out = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in text.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        try:
            out[key] = KEYS[key](raw)
        except ValueError as exc:
            raise ConfigError(f"{origin}:{lineno}: bad value for {key}: {exc}") from exc
    return out


def load_config(path=None, overrides=None):
    """Defaults, then the file at ``path``, then ``overrides`` (already typed)."""
    cfg = dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        cfg.update(parse_lines(text.splitlines(), str(p)))
    for k, v in (overrides or {}).items():
        if k not in KEYS:
            raise ConfigError(f"unknown key {k!r}")
        cfg[k] = v
    return cfg


def section(cfg, prefix, cls, **extra):
    """Build dataclass ``cls`` from the ``prefix.*`` keys of ``cfg``."""
    n = len(prefix) + 1
    kwargs = {k[n:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}
    kwargs.update(extra)
    return cls(**kwargs)


def hashable_view(cfg):
    """Config without file locations, so equal settings hash equally wherever the files live."""
    return {k: v for k, v in sorted(cfg.items()) if k not in ("data.dir", "data.series", "data.texts",
                                                                 "encoder.path", "model.backbone_weights")}
