"""Flat dotted-key run configuration with named profiles.

A config file holds one ``section.key = value`` per line; ``#`` starts a
comment.  Values are parsed as JSON when possible (numbers, lists, true/false)
and kept as strings otherwise.  Precedence: profile defaults < file < overrides.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping

from .backbone import BackboneConfig
from .data import SynthConfig
from .model import ModelConfig
from .preprocess import config_hash
from .tensor import ConfigurationError
from .train import TrainConfig

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "data.n_samples": 7089,
    "data.map_size": 224,
    "data.snr_image": 4.0,
    "data.snr_audio": 3.2,
    "data.snr_wave": 2.6,
    "data.rho": 0.05,
    "data.pixel_noise": 0.3,
    "data.class_ratio": [1, 1, 1],
    "model.d_m": 256,
    "model.heads": 4,
    "model.n_tokens": 4,
    "model.alpha": "wr",
    "backbone.stage_channels": [32, 64, 128, 256],
    "backbone.large_kernel": 13,
    "backbone.dilated_branches": [[13, 1], [5, 2], [3, 3]],
    "backbone.blocks_per_stage": 2,
    "backbone.se_reduction": 4,
    "backbone.mlp_ratio": 2,
    "train.batch_size": 32,
    "train.epochs": 100,
    "train.lr": 0.001,
    "train.plateau_patience": 5,
    "train.plateau_factor": 0.5,
    "train.split": [0.8, 0.1, 0.1],
    "lf.steps": 300,
    "lf.lr": 0.05,
}

_SMALL_BACKBONE = {
    "backbone.large_kernel": 7,
    "backbone.dilated_branches": [[7, 1], [3, 2]],
    "backbone.blocks_per_stage": 1,
}

PROFILES: dict[str, dict[str, object]] = {
    "full": {},
    "desk": {
        **_SMALL_BACKBONE,
        "data.n_samples": 3000,
        "data.map_size": 16,
        "model.d_m": 32,
        "backbone.stage_channels": [8, 16, 16, 32],
        "train.epochs": 10,
        "train.lr": 0.0005,
    },
    "smoke": {
        **_SMALL_BACKBONE,
        "data.n_samples": 60,
        "data.map_size": 16,
        "model.d_m": 32,
        "backbone.stage_channels": [4, 8, 8, 12],
        "train.epochs": 3,
        "lf.steps": 50,
    },
}


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _check_type(key: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigurationError(f"config key '{key}' expects {type(default).__name__}, got {value!r}")


def parse_config_text(text: str, source: str = "config") -> dict[str, object]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def parse_overrides(items: Iterable[str]) -> dict[str, object]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigurationError(f"override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def resolve(profile: str = "full", file_values: Mapping | None = None,
            overrides: Mapping | None = None) -> dict[str, object]:
    """Merge and validate; unknown keys raise ConfigurationError naming the key."""
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown profile '{profile}'; choose from {sorted(PROFILES)}")
    cfg = dict(DEFAULTS)
    cfg.update(PROFILES[profile])
    for layer in (file_values or {}, overrides or {}):
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigurationError(f"unknown config key '{key}'")
            _check_type(key, value, DEFAULTS[key])
            cfg[key] = float(value) if isinstance(DEFAULTS[key], float) else value
    build_synth(cfg), build_model(cfg), build_train(cfg)
    return cfg


def dump(cfg: Mapping) -> str:
    return "".join(f"{k} = {json.dumps(cfg[k])}\n" for k in sorted(cfg))


def write_effective(cfg: Mapping, out_dir: str | Path) -> str:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = config_hash(cfg)
    (out / "config.txt").write_text(f"# config hash {h}\n" + dump(cfg))
    return h


def _section(cfg: Mapping, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def build_synth(cfg: Mapping) -> SynthConfig:
    return SynthConfig(**_section(cfg, "data."), seed=int(cfg["seed"]))


def build_backbone(cfg: Mapping) -> BackboneConfig:
    return BackboneConfig(**_section(cfg, "backbone."))


def build_model(cfg: Mapping, **kw) -> ModelConfig:
    """Model config from ``model.*`` keys; keyword arguments take precedence."""
    return ModelConfig(**{**_section(cfg, "model."), **kw}, backbone=build_backbone(cfg))


def build_train(cfg: Mapping) -> TrainConfig:
    return TrainConfig(**_section(cfg, "train."), seed=int(cfg["seed"]))
