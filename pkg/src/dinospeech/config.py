"""JSON run configuration: nested dataclasses with strict key checking."""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import asdict, dataclass
from pathlib import Path

from .audio import LogMelConfig
from .cluster import ClusterConfig, SupervisedConfig
from .corpus import AugmentPolicy, CropConfig, SyntheticConfig
from .dino import DinoConfig
from .errors import ConfigError
from .nn import ConvSpec, EncoderConfig


@dataclass(frozen=True)
class DataConfig:
    synthetic: SyntheticConfig = SyntheticConfig()
    logmel: LogMelConfig = LogMelConfig()
    n_target_trials: int = 0
    n_nontarget_trials: int = 0


@dataclass(frozen=True)
class EvalConfig:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0
    branch: str = "teacher"


@dataclass(frozen=True)
class ProbeConfig:
    l2_reg: float = 1e-3
    steps: int = 500
    lr: float = 0.5
    test_fraction: float = 0.3


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    encoder: EncoderConfig = EncoderConfig()
    dino: DinoConfig = DinoConfig()
    supervised: SupervisedConfig = SupervisedConfig()
    cluster: ClusterConfig = ClusterConfig()
    eval: EvalConfig = EvalConfig()
    probe: ProbeConfig = ProbeConfig()
    seed: int = 0


def _build(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path or 'config'}: expected an object")
        return from_dict(tp, value, path)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_build(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} values")
        return tuple(_build(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _build(args[0], value, path)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def from_dict(cls, data: dict, path: str = ""):
    """Instantiate dataclass ``cls`` from ``data``; unknown keys raise ConfigError naming the key."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key {where!r}")
    kwargs = {k: _build(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def to_dict(cfg) -> dict:
    return asdict(cfg)


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    cfg = from_dict(RunConfig, data)
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg: RunConfig) -> None:
    cfg.data.synthetic.validate()
    cfg.encoder.validate()
    cfg.dino.validate()
    cfg.supervised.validate()
    cfg.cluster.validate()


def dump_config(cfg, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")


def encoder_config_from_dict(d: dict) -> EncoderConfig:
    return from_dict(EncoderConfig, d)


def dino_config_from_dict(d: dict) -> DinoConfig:
    return from_dict(DinoConfig, d)


__all__ = [
    "AugmentPolicy",
    "ClusterConfig",
    "ConvSpec",
    "CropConfig",
    "DataConfig",
    "DinoConfig",
    "EncoderConfig",
    "EvalConfig",
    "LogMelConfig",
    "ProbeConfig",
    "RunConfig",
    "SupervisedConfig",
    "SyntheticConfig",
    "dump_config",
    "from_dict",
    "load_run_config",
    "to_dict",
]
