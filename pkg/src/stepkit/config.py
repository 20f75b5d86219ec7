"""Run configuration: one YAML document with a section per stage."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .bmc2 import LossConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .keysteps import ExtractConfig
from .pipeline import EvalOptions
from .synth import SynthConfig
from .trainer import TrainConfig

THREADS_ENV = "STEPKIT_THREADS"


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    extract: ExtractConfig = field(default_factory=ExtractConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _apply(target, updates: dict, where: str):
    """Overwrite dataclass fields from a mapping, recursing into nested configs."""
    if not isinstance(updates, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(updates).__name__}")
    known = {f.name: f for f in dataclasses.fields(target)}
    for key, value in updates.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where}.{key}; known: {', '.join(known)}")
        current = getattr(target, key)
        if dataclasses.is_dataclass(current):
            _apply(current, value, f"{where}.{key}")
        else:
            if isinstance(current, tuple) and isinstance(value, list):
                value = tuple(value)
            setattr(target, key, value)
    return target


def load_config(path: Optional[str] = None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    try:
        doc = yaml.safe_load(Path(path).read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    _apply(cfg, doc, "config")
    return cfg


def set_path(cfg: RunConfig, dotted: str, value: Any) -> None:
    """Apply a command-line override such as ``train.loss.sigma``; ``None`` leaves the value alone."""
    if value is None:
        return
    *parents, leaf = dotted.split(".")
    obj = cfg
    for p in parents:
        obj = getattr(obj, p)
    setattr(obj, leaf, value)


def default_threads() -> Optional[int]:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be positive, got {n}")
    return n
