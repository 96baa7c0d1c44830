"""Declarative experiment configuration and its YAML file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .ensemble import WeightScheme
from .net import SgdConfig
from .strategies import StrategyConfig
from .stream import ConfigError, StreamConfig


@dataclass(frozen=True)
class EmaConfig:
    momentum: float = 0.99
    warmup_momentum: float = 0.9
    warmup_iters: int = 50
    init_with_first_model: bool = False    # default: seed the average with the random init


@dataclass
class ExperimentConfig:
    stream: StreamConfig
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    ema: EmaConfig = field(default_factory=EmaConfig)
    schemes: list[WeightScheme] = field(default_factory=list)
    buffer_capacity: int = 200
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    output_dir: str = "runs/experiment"
    checkpoint_every: int = 0              # 0 disables checkpointing
    hidden_sizes: tuple[int, ...] = (64, 64)
    dataset_path: str | None = None        # file_backed streams only
    test_dataset_path: str | None = None

    def validate(self):
        self.stream.validate()
        self.strategy.validate(self.stream.batch_size)
        self.sgd.validate()
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.buffer_capacity < 1:
            raise ConfigError("buffer_capacity must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.stream.source == "file_backed" and not self.dataset_path:
            raise ConfigError("file_backed streams need dataset_path")

    def layer_sizes(self) -> tuple[int, ...]:
        return (self.stream.input_dim, *self.hidden_sizes, self.stream.total_classes)


def _build(cls, section: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in {where}")
    return cls(**section)


def _parse_scheme(entry) -> WeightScheme:
    if isinstance(entry, str):
        return WeightScheme(kind=entry)
    if isinstance(entry, dict):
        return _build(WeightScheme, entry, "schemes")
    raise ConfigError(f"scheme entries must be a name or a mapping, got {entry!r}")


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    if "stream" not in data:
        raise ConfigError("config needs a 'stream' section")
    kwargs = {
        "stream": _build(StreamConfig, data.pop("stream"), "stream"),
        "strategy": _build(StrategyConfig, data.pop("strategy", {}), "strategy"),
        "sgd": _build(SgdConfig, data.pop("sgd", {}), "sgd"),
        "ema": _build(EmaConfig, data.pop("ema", {}), "ema"),
        "schemes": [_parse_scheme(s) for s in data.pop("schemes", [])],
    }
    for name in ("seeds", "hidden_sizes"):
        if name in data:
            data[name] = tuple(data[name])
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level key {sorted(unknown)[0]!r}")
    cfg = ExperimentConfig(**kwargs, **data)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    try:
        return config_from_dict(data)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["schemes"] = [dataclasses.asdict(s) for s in cfg.schemes]
    out["seeds"] = list(cfg.seeds)
    out["hidden_sizes"] = list(cfg.hidden_sizes)
    return out


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False), encoding="utf-8")
