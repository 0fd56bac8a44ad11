"""Flat JSON run configuration.

Keys are the :class:`TrainConfig` field names, the strong policy fields prefixed
with ``strong_``, the TTA policy fields prefixed with ``tta_``, and the data/output
paths.  Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .augment import StrongPolicy
from .evaluate import TTAPolicy
from .trainer import ConfigError, TrainConfig


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    tta: TTAPolicy = field(default_factory=TTAPolicy)
    train_data: str = "data/train.wps"
    val_data: str = "data/val.wps"
    test_data: str = "data/test.wps"
    out_dir: str = "runs/default"


_PATH_KEYS = ("train_data", "val_data", "test_data", "out_dir")


def _coerce(key, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, (tuple, list)):
        if not isinstance(value, (list, tuple)) or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
            raise ConfigError(f"{key}: expected a list of numbers, got {value!r}")
        if isinstance(default, tuple) and len(value) != len(default):
            raise ConfigError(f"{key}: expected {len(default)} numbers, got {len(value)}")
        vals = [float(v) for v in value]
        return tuple(vals) if isinstance(default, tuple) else vals
    raise ConfigError(f"{key}: unsupported value {value!r}")


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def to_flat(cfg: RunConfig) -> dict:
    out = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name != "strong":
            out[f.name] = _jsonable(getattr(cfg.train, f.name))
    for f in dataclasses.fields(StrongPolicy):
        out[f"strong_{f.name}"] = _jsonable(getattr(cfg.train.strong, f.name))
    for f in dataclasses.fields(TTAPolicy):
        out[f"tta_{f.name}"] = _jsonable(getattr(cfg.tta, f.name))
    for k in _PATH_KEYS:
        out[k] = getattr(cfg, k)
    return out


def from_flat(doc: dict) -> RunConfig:
    """Build a validated :class:`RunConfig`; missing keys take their defaults."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    defaults = to_flat(RunConfig())
    unknown = sorted(set(doc) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    base = RunConfig()
    train_kw, strong_kw, tta_kw, path_kw = {}, {}, {}, {}
    for key, value in doc.items():
        if key.startswith("strong_"):
            name = key[len("strong_"):]
            strong_kw[name] = _coerce(key, value, getattr(base.train.strong, name))
        elif key.startswith("tta_"):
            name = key[len("tta_"):]
            tta_kw[name] = _coerce(key, value, getattr(base.tta, name))
        elif key in _PATH_KEYS:
            path_kw[key] = _coerce(key, value, getattr(base, key))
        else:
            train_kw[key] = _coerce(key, value, getattr(base.train, key))
    try:
        tta = TTAPolicy(**tta_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    train = TrainConfig(strong=StrongPolicy(**strong_kw), **train_kw)
    train.validate()
    return RunConfig(train=train, tta=tta, **path_kw)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return from_flat(doc)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(to_flat(cfg), indent=2, sort_keys=True)
