"""Declarative configuration (YAML) for controllers, labeling, training and
simulator scenarios.

``load_config()`` returns the packaged defaults; ``load_config(path)``
merges a user file over them.  See ``default_config.yaml`` for the schema.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, fields
from importlib import resources

import yaml

from .calibration import TrainingConfig
from .control import AdmittanceParams, GraspControllerParams, SafetyLimits
from .policy_io import LabelingConfig


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    admittance: AdmittanceParams
    gripper: GraspControllerParams
    safety: SafetyLimits
    labeling: LabelingConfig
    training: TrainingConfig
    policy_rate: float
    scenarios: dict
    raw: dict


def _defaults() -> dict:
    text = resources.files(__package__).joinpath("default_config.yaml").read_text()
    return yaml.safe_load(text)


def _merge(base: dict, override: dict, path=""):
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            if path.startswith("scenarios") and path.count(".") == 0:
                base[key] = value  # new scenario
                continue
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, where)
        else:
            base[key] = value
    return base


def _build(cls, section: dict, name: str):
    known = {f.name for f in fields(cls)}
    extra = set(section) - known
    if extra:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{name}]: {exc}") from exc


def load_config(path=None, overrides: dict | None = None) -> Config:
    raw = _defaults()
    if path is not None:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a mapping")
        _merge(raw, user)
    if overrides:
        _merge(raw, copy.deepcopy(overrides))
    return Config(
        admittance=_build(AdmittanceParams, raw["admittance"], "admittance"),
        gripper=_build(GraspControllerParams, raw["gripper"], "gripper"),
        safety=_build(SafetyLimits, raw["safety"], "safety"),
        labeling=_build(LabelingConfig, raw["labeling"], "labeling"),
        training=_build(TrainingConfig, raw["training"], "training"),
        policy_rate=float(raw["policy_rate"]),
        scenarios=raw["scenarios"],
        raw=raw,
    )
