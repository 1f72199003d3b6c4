"""Run configuration: JSON documents with strict keys, defaults, overrides,
and a provenance digest.

A run config is a JSON object with the sections below. Files may specify any
subset; unspecified fields take defaults, unknown keys are rejected. All
randomness in a run flows from the single top-level seed.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import ConfigError

__all__ = ["DEFAULTS", "load_config", "resolve_config", "apply_overrides", "config_digest"]

DEFAULTS: dict = {
    "seed": 0,
    "data": {
        "volume": "volume.segv",
        "masks": "masks.segv",
        "out_dir": "run",
        "clip_lo_pct": 1.0,
        "clip_hi_pct": 99.0,
    },
    "synth": {
        "slices": 24,
        "height": 160,
        "width": 240,
        "num_classes": 8,  # merged down to 7 by prepare
        "horizon_waviness": 5.0,
    },
    "split": {
        "n_blocks": 10,
        "train_fraction": 0.7,
        "slice_limit": None,
        "test_count": 40,
        "test_slices": None,  # explicit list wins over test_count
    },
    "tiles": {"tile_h": 80, "tile_w": 120, "overlap_fraction": 0.5},
    "model": {"preset": "danet-fcn2", "dsl_path": None, "width_scale": 1.0,
              "bn_eps": 1e-5, "bn_momentum": 0.997},
    "train": {
        "batch_size": 64,
        "max_epochs": 200,
        "eval_every": 1,
        "lr_schedule": [[0, 0.01], [50, 0.001], [100, 5e-4], [150, 1e-5]],
    },
    "optimizer": {"decay": 0.9, "momentum": 0.9, "epsilon": 1.0, "weight_decay": 5e-4},
    "eval": {"tile_h": 80, "tile_w": 120},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    """Read a JSON config file and resolve it against the defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return resolve_config(doc)


def resolve_config(partial: dict | None = None) -> dict:
    return _merge(DEFAULTS, partial or {})


def apply_overrides(config: dict, assignments) -> dict:
    """Apply ``section.key=json_value`` overrides from the command line."""
    out = copy.deepcopy(config)
    for assignment in assignments or ():
        if "=" not in assignment:
            raise ConfigError(f"override {assignment!r} is not of the form key=value")
        dotted, raw = assignment.split("=", 1)
        keys = dotted.split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings are convenient on the command line
        node = out
        parents = DEFAULTS
        for k in keys[:-1]:
            if not isinstance(parents, dict) or k not in parents:
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node.setdefault(k, {})
            parents = parents[k]
        leaf = keys[-1]
        if not isinstance(parents, dict) or leaf not in parents:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(parents[leaf], dict):
            raise ConfigError(f"{dotted} names a section, not a field")
        node[leaf] = value
    return out


def config_digest(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
