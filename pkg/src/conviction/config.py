"""Run configuration: JSON documents, dotted overrides and seed splitting."""
from __future__ import annotations

import copy
import dataclasses
import json
import zlib
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import ConfigError
from .networks import NETWORKS
from .training import LOSS_DEFAULTS

# Sections whose contents are validated elsewhere (model fields depend on the kind).
_OPEN_SECTIONS = {"model"}

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "threads": 1,
    "image": {"size": 32, "count": 4, "test_count": 4, "jitter": 1.0, "noise": 0.0, "coils": 2},
    "mask": {"pattern": "radial", "ratio": 0.4},
    "dataset": {"train": None, "val": None, "val_fraction": 0.2},
    "solver": {
        "alpha0": 0.01, "tau0": 0.01, "a": 1e5, "sigma": 1e3, "rho": 0.9, "gamma": 0.9,
        "eps0": 1e-3, "eps_tol": 1e-3, "T_max": 200, "max_backtracks": 200,
    },
    "regularizer": {"depth": 3, "features": 4, "kernel_size": 3, "delta": 1e-3, "mode": "complex",
                    "omega": -4.0, "weight": None},
    "model": {"kind": "loa"},
    "loss": {"kind": "recon-l2", "weights": None},
    "train": {
        "epochs": 100, "lr": 1e-3, "batch_size": 25, "stair": False, "stair_start": 1,
        "stair_patience": 10, "stair_tol": 1e-4, "frozen": ["omega"], "resume": None,
    },
    "bilevel": {
        "K": 1, "rho_theta": 1e-3, "rho_omega": 1e-3, "delta0": 1e-3, "nu_delta": 0.95,
        "delta_tol": 4.35e-6, "lambda0": 1e-5, "nu_lambda": 1.001, "batch_train": 8, "batch_val": 8,
        "max_outer": 200, "inner_cap": 200, "step_rule": "adam",
        "tasks": [{"pattern": "radial", "ratio": 0.2}, {"pattern": "radial", "ratio": 0.4}],
    },
    "recon": {"method": "loa", "checkpoint": None, "untrained": True, "inputs": None, "report": True},
    "check": {"cases": 100, "instances": 20, "seeds": 20},
}


def _check_model(model: Mapping) -> None:
    kind = model.get("kind", "loa")
    if kind not in NETWORKS:
        raise ConfigError(f"unknown model kind {kind!r}; choose from {sorted(NETWORKS)}")
    names = {f.name for f in dataclasses.fields(NETWORKS[kind])}
    extra = set(model) - names - {"kind"}
    if extra:
        raise ConfigError(f"unknown model keys for {kind!r}: {sorted(extra)}")


def _merge(base: dict, upd: Mapping, path: str = "") -> dict:
    for k, v in upd.items():
        key = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict) and k not in _OPEN_SECTIONS:
            if not isinstance(v, Mapping):
                raise ConfigError(f"config key {key!r} must be a table")
            _merge(base[k], v, key + ".")
        elif k in _OPEN_SECTIONS:
            if not isinstance(v, Mapping):
                raise ConfigError(f"config key {key!r} must be a table")
            base[k].update(v)
        else:
            base[k] = copy.deepcopy(v)
    return base


def parse_value(text: str) -> Any:
    """JSON literal if it parses, otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value`` override in place."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    upd: dict = {}
    cur = upd
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = parse_value(raw)
    if parts[0] == "loss" and parts[1:2] == ["weights"] and len(parts) > 2:
        # individual weights extend the default table instead of replacing it
        current = dict(cfg["loss"]["weights"] or LOSS_DEFAULTS.get(cfg["loss"]["kind"], {}))
        current[parts[2]] = upd["loss"]["weights"][parts[2]]
        cfg["loss"]["weights"] = current
        return cfg
    return _merge(cfg, upd)


def load_config(path: str | Path | None = None, overrides=(), seed: int | None = None) -> dict:
    """Defaults, then the JSON file, then ``--set`` overrides, then ``--seed``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(doc, Mapping):
            raise ConfigError("config document must be a JSON object")
        _merge(cfg, doc)
    for a in overrides:
        apply_override(cfg, a)
    if seed is not None:
        cfg["seed"] = int(seed)
    _check_model(cfg["model"])
    return cfg


def derive_rng(root_seed: int, consumer: str) -> np.random.Generator:
    """Independent generator for a named consumer of the root seed."""
    ss = np.random.SeedSequence([int(root_seed) & 0xFFFFFFFF, zlib.crc32(consumer.encode())])
    return np.random.default_rng(ss)


def derive_seed(root_seed: int, consumer: str) -> int:
    return int(derive_rng(root_seed, consumer).integers(0, 2**31 - 1))
