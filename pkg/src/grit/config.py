"""Run configuration: one JSON document merging model, training, generator and split settings.

Schema (every key optional; unknown keys are rejected)::

    {
      "seed": 0,
      "model":     {ModelConfig fields},
      "train":     {TrainConfig fields},
      "generator": {GeneratorConfig fields},
      "split":     {"versions": 5, "required_layers": 20}
    }
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import REQUIRED_LAYERS, GeneratorConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SplitConfig:
    versions: int = 5
    required_layers: int = REQUIRED_LAYERS

    def __post_init__(self):
        if self.versions < 1:
            raise ConfigError("split.versions must be >= 1")
        if self.required_layers < 1:
            raise ConfigError("split.required_layers must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    split: SplitConfig = field(default_factory=SplitConfig)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": asdict(self.model),
            "train": asdict(self.train),
            "generator": asdict(self.generator),
            "split": asdict(self.split),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "generator": GeneratorConfig,
             "split": SplitConfig}


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {unknown}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{section}: {err}") from None


def config_from_dict(values: dict) -> RunConfig:
    if not isinstance(values, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(values) - {"seed", *_SECTIONS})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    seed = values.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    parts = {name: _build(cls, values.get(name, {}), name) for name, cls in _SECTIONS.items()}
    try:
        parts["generator"].validate()
    except ValueError as err:
        raise ConfigError(f"generator: {err}") from None
    return RunConfig(seed=seed, **parts)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        values = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON: {err}") from None
    return config_from_dict(values)


def with_overrides(cfg: RunConfig, *, seed=None, records=None, versions=None, epochs=None,
                   topology=None, weight_variant=None) -> RunConfig:
    """Apply command-line flags on top of a loaded config; flags win."""
    try:
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if records is not None:
            cfg = replace(cfg, generator=replace(cfg.generator, records=records))
        if versions is not None:
            cfg = replace(cfg, split=replace(cfg.split, versions=versions))
        if epochs is not None:
            cfg = replace(cfg, train=replace(cfg.train, epochs=epochs))
        if topology is not None:
            cfg = replace(cfg, model=replace(cfg.model, topology=topology))
        if weight_variant is not None:
            cfg = replace(cfg, model=replace(cfg.model, weight_variant=weight_variant))
        cfg.generator.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from None
    return cfg
