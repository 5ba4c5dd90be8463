"""JSON run configuration: one section per config dataclass, unknown keys rejected."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .engine import AugmentConfig
from .errors import ConfigurationError
from .features import BackboneConfig
from .loss import LossConfig
from .matcher import MatcherConfig
from .optim import OptimSchedule

SECTIONS = {
    "backbone": BackboneConfig,
    "matcher": MatcherConfig,
    "loss": LossConfig,
    "schedule": OptimSchedule,
    "augment": AugmentConfig,
}


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: OptimSchedule = field(default_factory=OptimSchedule)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigurationError(f"config section '{where}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in '{where}': {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"bad value in '{where}': {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a JSON object")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigurationError(f"unknown config section(s): {', '.join(unknown)}")
    return RunConfig(**{name: _build(cls, data.get(name, {}), name) for name, cls in SECTIONS.items()})


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)
