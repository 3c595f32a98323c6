"""Configuration tree: defaults <- YAML file <- command-line overrides.

Keys are validated strictly: an unknown key or a value of the wrong type is
an error naming the offending key.
"""
from __future__ import annotations

import copy
from pathlib import Path
from typing import Any

import yaml

from .biasfield import load_coefficient_table
from .dataset import DEFAULT_AUGMENTATIONS, EXPECTED_SHAPE, AugmentationParams
from .nets import NetworkConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "data": {
        "root": None,
        "strict_dims": True,
        "expected_shape": list(EXPECTED_SHAPE),
        "subjects": None,
        "toy_subjects": 2,
        "toy_shape": [12, 30, 30],
    },
    "augment": {
        "variants": None,
    },
    "bias": {
        "mode": "multiplicative",
        "amplitude": 0.3,
        "coeff_table_path": None,
    },
    "net": {
        "in_channels": 3,
        "base_filters": 100,
        "depth": 8,
        "kernel_size": 3,
        "slice_size": 512,
        "output_activation": "tanh",
        "disc_filters": 64,
        "disc_layers": 3,
        "dropout": 0.5,
        "dropout_stages": 3,
    },
    "train": {
        "learning_rate": 0.0002,
        "batch_size": 20,
        "max_epochs": 500,
        "early_stop_l1": 0.01,
        "l1_weight": 10.0,
        "disc_win_patience": 10,
        "seed": 0,
        "beta1_unet": 0.9,
        "beta1_cgan": 0.5,
        "beta2": 0.999,
    },
    "eval": {
        "batch_size": 20,
    },
}

# Desk-scale profile: runs end to end on a laptop CPU with synthetic phantoms.
TOY_PROFILE: dict[str, Any] = {
    "data": {"expected_shape": None},
    "net": {"slice_size": 64, "base_filters": 4, "depth": 2, "dropout_stages": 0, "disc_filters": 8, "disc_layers": 2},
    "train": {"max_epochs": 200, "learning_rate": 0.003, "batch_size": 3},
}

# keys whose value may be null or of more than one type
_NULLABLE = {"data.root", "data.subjects", "data.expected_shape", "augment.variants", "bias.coeff_table_path"}


def _merge(base: dict, update: dict, strict: bool, prefix: str = "") -> None:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            if strict:
                raise ConfigError(f"unknown config key {path!r}")
            base[key] = value
            continue
        current = base[key]
        if isinstance(current, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            _merge(current, value, strict, path + ".")
            continue
        base[key] = _coerce(path, current, value)


def _coerce(path: str, current, value):
    if value is None:
        if path in _NULLABLE:
            return None
        raise ConfigError(f"config key {path!r} cannot be null")
    if current is None or path in _NULLABLE:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {path!r} expects a boolean, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {path!r} expects a number, got {value!r}")
        return float(value)
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {path!r} expects an integer, got {value!r}")
        return value
    if isinstance(current, (list, str)) and not isinstance(value, type(current)):
        raise ConfigError(f"config key {path!r} expects a {type(current).__name__}, got {value!r}")
    return value


def parse_override(item: str) -> dict:
    """``"train.batch_size=8"`` -> ``{"train": {"batch_size": 8}}`` (value parsed as YAML)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    dotted, raw = item.split("=", 1)
    value = yaml.safe_load(raw)
    tree: dict = {}
    node = tree
    parts = dotted.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return tree


def load_config(
    path: str | Path | None = None,
    overrides: list[dict] | dict | None = None,
    profile: str | None = None,
    strict: bool = True,
) -> dict:
    """Resolve the configuration tree.

    Precedence, lowest first: built-in defaults, the ``toy`` profile if
    requested, the YAML file at ``path``, then ``overrides`` in order.
    """
    cfg = copy.deepcopy(DEFAULTS)
    if profile == "toy":
        _merge(cfg, copy.deepcopy(TOY_PROFILE), strict=True)
    elif profile is not None:
        raise ConfigError(f"unknown profile {profile!r}")
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, loaded, strict)
    if isinstance(overrides, dict):
        overrides = [overrides]
    for update in overrides or []:
        _merge(cfg, update, strict)
    return cfg


def network_config(cfg: dict, n_tasks: int) -> NetworkConfig:
    return NetworkConfig(**cfg["net"], out_channels=3 * n_tasks, seed=cfg["train"]["seed"])


def train_config(cfg: dict, method: str) -> TrainConfig:
    return TrainConfig(**cfg["train"], method=method)


def augmentations(cfg: dict) -> list[AugmentationParams]:
    variants = cfg["augment"]["variants"]
    if variants is None:
        return list(DEFAULT_AUGMENTATIONS)
    out = []
    for i, v in enumerate(variants):
        unknown = set(v) - {"rotation_deg", "zoom_factor", "translate_xy", "seed"}
        if unknown:
            raise ConfigError(f"unknown augmentation keys {sorted(unknown)}")
        out.append(AugmentationParams(
            float(v.get("rotation_deg", 0.0)),
            float(v.get("zoom_factor", 1.0)),
            tuple(v.get("translate_xy", (0.0, 0.0))),
            int(v.get("seed", i)),
        ))
    return out


def coefficient_table(cfg: dict):
    path = cfg["bias"]["coeff_table_path"]
    return None if path is None else load_coefficient_table(path)
