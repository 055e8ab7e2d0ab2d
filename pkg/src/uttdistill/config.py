"""Flat key-value run configuration.

A config file holds one ``key = value`` pair per line; ``#`` starts a comment.
Every key is also a CLI flag (``lr_peak`` <-> ``--lr-peak``). Keys are the
fields of :class:`ModelConfig`, :class:`TrainConfig` and :class:`ProbeConfig`
(the latter prefixed ``probe_``), plus the run-level keys in ``RUN_DEFAULTS``.
Tuples are written comma separated; booleans as ``true``/``false``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import fields, replace
from pathlib import Path

from .distill import TRAIN_PRESETS, TrainConfig
from .model import ModelConfig, preset
from .probe import ProbeConfig


class ConfigError(ValueError):
    pass


RUN_DEFAULTS = {
    "model_preset": "desk",
    "train_preset": "desk",
    "n_utts": 400,
    "n_classes": 4,
    "n_speakers": 10,
    "layer_agg": "last",
    "split_scheme": "session_5fold",
    "split_k": 5,
}

_MODEL_KEYS = [f.name for f in fields(ModelConfig)]
_TRAIN_KEYS = [f.name for f in fields(TrainConfig)]
_PROBE_KEYS = ["probe_" + f.name for f in fields(ProbeConfig) if f.name != "seed"]


def all_keys() -> list[str]:
    return list(RUN_DEFAULTS) + _MODEL_KEYS + _TRAIN_KEYS + _PROBE_KEYS


def default_config(model_preset: str = "desk", train_preset: str = "desk") -> dict:
    cfg = dict(RUN_DEFAULTS, model_preset=model_preset, train_preset=train_preset)
    cfg.update(preset(model_preset).to_dict())
    try:
        cfg.update(TRAIN_PRESETS[train_preset].to_dict())
    except KeyError:
        raise ConfigError(f"unknown train preset {train_preset!r}; choose from {sorted(TRAIN_PRESETS)}") from None
    for f in fields(ProbeConfig):
        if f.name != "seed":
            cfg["probe_" + f.name] = f.default
    return cfg


def _coerce(key: str, raw: str, like):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if like is None:
            return None if raw.lower() in ("none", "") else int(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in all_keys():
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def resolve(file_values: dict[str, str] | None = None, overrides: dict[str, str] | None = None) -> dict:
    """Effective config: presets, then the file, then CLI overrides."""
    raw = dict(file_values or {})
    raw.update(overrides or {})
    for key in raw:
        if key not in all_keys():
            raise ConfigError(f"unknown key {key!r}")
    cfg = default_config(raw.get("model_preset", RUN_DEFAULTS["model_preset"]),
                         raw.get("train_preset", RUN_DEFAULTS["train_preset"]))
    for key, value in raw.items():
        cfg[key] = _coerce(key, value, cfg[key]) if isinstance(value, str) else value
    if "n_layers" in raw and "top_k" not in raw:
        cfg["top_k"] = None
    return cfg


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> dict:
    file_values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        file_values = parse_config_text(path.read_text(), str(path))
    return resolve(file_values, overrides)


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**{k: cfg[k] for k in _MODEL_KEYS})


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**{k: cfg[k] for k in _TRAIN_KEYS})


def probe_config(cfg: dict, seed: int) -> ProbeConfig:
    return ProbeConfig(seed=seed, **{k[len("probe_"):]: cfg[k] for k in _PROBE_KEYS})


def with_values(cfg: dict, **values) -> dict:
    out = dict(cfg)
    out.update(values)
    return out


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def render(cfg: dict) -> str:
    return "".join(f"{k} = {format_value(cfg[k])}\n" for k in all_keys())


def config_hash(cfg: dict) -> str:
    blob = json.dumps({k: format_value(cfg[k]) for k in all_keys()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]
