"""Run configuration files: YAML sections mapped onto the config dataclasses.

Every field is optional and falls back to the dataclass default; unknown
keys are rejected with the offending path so typos fail loudly. The parsed
config is echoed verbatim into each command's run record.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field

import yaml

from .backbone import BackboneConfig
from .codec import CodecTrainConfig
from .degradations import DegradationConfig
from .pipeline import GenerationConfig
from .sampling import RestoreConfig
from .training import LossConfig, SamplerConfig, TrainRunConfig

CONFIG_PATH_ENV = "FLOWRESTORE_CONFIG_PATH"


class ConfigError(ValueError):
    pass


def _build(cls, data, path: str):
    """Recursively construct a dataclass from plain dicts, strict on keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path or cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    hints = typing.get_type_hints(cls)
    for name, value in data.items():
        target = hints.get(name, fields[name].type)
        kwargs[name] = _coerce(target, value, f"{path}.{name}" if path else name)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def _coerce(target, value, path: str):
    origin = typing.get_origin(target)
    if dataclasses.is_dataclass(target):
        return _build(target, value, path)
    if origin is tuple and isinstance(value, (list, tuple)):
        args = typing.get_args(target)
        if args and args[-1] is Ellipsis:
            elem = args[0]
            return tuple(_coerce(elem, v, f"{path}[{i}]") for i, v in enumerate(value))
        if args and len(args) == len(value):
            return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
        return tuple(value)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", ())):
        return value
    if target is float and isinstance(value, int):
        return float(value)
    return value


@dataclass
class CodecSection:
    kind: str = "conv_autoencoder"
    spatial_factor: int = 4
    latent_channels: int = 8
    train: CodecTrainConfig = field(default_factory=CodecTrainConfig)


@dataclass
class AdapterSection:
    rank: int = 32
    mode: str = "se"


@dataclass
class RunConfig:
    codec: CodecSection = field(default_factory=CodecSection)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    backbone_train: TrainRunConfig = field(default_factory=lambda: TrainRunConfig(learning_rate=3e-4))
    adapter: AdapterSection = field(default_factory=AdapterSection)
    adapter_train: TrainRunConfig = field(default_factory=TrainRunConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    restore: RestoreConfig = field(default_factory=RestoreConfig)


def parse_run_config(data: dict | None) -> RunConfig:
    return _build(RunConfig, data, "")


def resolve_config_path(path: str | None) -> str | None:
    """Resolve a config path, consulting the env search path for bare names."""
    if path is None:
        return None
    if os.path.exists(path):
        return path
    search = os.environ.get(CONFIG_PATH_ENV, "")
    for root in filter(None, search.split(os.pathsep)):
        candidate = os.path.join(root, path)
        if os.path.exists(candidate):
            return candidate
    raise ConfigError(f"config file not found: {path}")


def load_run_config(path: str | None) -> tuple[RunConfig, str]:
    """Load a YAML run config; returns (config, raw text for echoing)."""
    if path is None:
        return RunConfig(), ""
    resolved = resolve_config_path(path)
    with open(resolved) as fh:
        raw = fh.read()
    data = yaml.safe_load(raw)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{resolved}: top level must be a mapping")
    return parse_run_config(data), raw
