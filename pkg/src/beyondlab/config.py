"""Run configuration: JSON sections data / models / augment / detector / attacks / eval."""

from __future__ import annotations

import copy
import json
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

from .augment import AugmentationSpec, default_policy

SECTIONS = ("data", "models", "augment", "detector", "attacks", "eval")


class ConfigError(ValueError):
    kind = "config"


def parse_eps(value) -> float:
    """Budgets as decimals or fractions such as ``"8/255"``."""
    if isinstance(value, (int, float)):
        out = float(value)
    else:
        text = str(value).strip()
        try:
            out = float(Fraction(text)) if "/" in text else float(text)
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"cannot parse budget {value!r}") from None
    if out < 0:
        raise ConfigError(f"budget must be non-negative, got {value!r}")
    return out


def eps_label(eps: float) -> str:
    """Short human form, ``8/255`` when eps is a whole number of grey levels."""
    n = eps * 255
    return f"{round(n)}/255" if abs(n - round(n)) < 1e-9 else f"{eps:g}"


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "data": {"classes": 10, "per_class": 200, "test_per_class": 60, "size": [32, 32, 3], "hue_jitter": 0.03},
    "models": {
        "widths": [8, 16],
        "classifier": {"epochs": 6, "batch": 64, "lr": 0.05, "momentum": 0.9},
        "ssl": {"epochs": 6, "batch": 64, "lr": 0.01, "momentum": 0.9},
        "head": {"epochs": 40, "batch": 64, "lr": 0.05, "momentum": 0.9, "aug_rounds": 3},
    },
    "augment": {"policy": [s.to_dict() for s in default_policy()]},
    "detector": {"k": 50, "target_fpr": 0.05, "calibration_fraction": 0.5},
    "attacks": {"kind": "pgd", "eps": 16 / 255, "steps": 10, "step_size": None, "alpha": 1.0, "k_eot": 8,
                "strategy": "orthogonal", "max_samples": 300},
    "eval": {"neighbors_grid": [5, 10, 25, 50], "alpha_grid": [0.0, 1.0], "eps_grid": [4 / 255, 16 / 255, 64 / 255],
             "ablation_grid": ["combined", "label", "rep"], "fpr_cap": 0.05, "max_samples": 200},
}


def _merge(base: dict, over: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict) and isinstance(val, Mapping):
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _normalize(cfg: dict) -> dict:
    att = cfg["attacks"]
    att["eps"] = parse_eps(att["eps"])
    if att["step_size"] is not None:
        att["step_size"] = parse_eps(att["step_size"])
    cfg["eval"]["eps_grid"] = [parse_eps(e) for e in cfg["eval"]["eps_grid"]]
    try:
        [AugmentationSpec.from_dict(d) for d in cfg["augment"]["policy"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad augmentation policy: {exc}") from None
    return cfg


def resolve(user: Mapping | None = None, overrides: Mapping | None = None) -> dict:
    """Defaults <- config file <- flag overrides (dotted keys), normalized."""
    cfg = _merge(DEFAULTS, user or {})
    for dotted, val in (overrides or {}).items():
        node = cfg
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key '{dotted}'")
        node[parts[-1]] = val
    return _normalize(cfg)


def load(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    return doc


def policy_of(cfg: Mapping) -> list[AugmentationSpec]:
    return [AugmentationSpec.from_dict(d) for d in cfg["augment"]["policy"]]
