"""JSON run configuration shared by the command-line tools.

A run config nests the simulator settings, the model settings and a few
run-level knobs. Every section rejects keys it does not know, so a typo
fails loudly instead of silently falling back to a default. See
``configs/default.json`` for the full key set with defaults.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .models import ModelConfig
from .simulator import SimConfig


class ConfigError(ValueError):
    pass


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def dataclass_from_dict(cls, d: dict, where: str = ""):
    """Build ``cls`` from a (possibly partial) dict, recursing into nested dataclasses."""
    if not isinstance(d, dict):
        raise ConfigError(f"{where or cls.__name__}: expected an object, got {type(d).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key {where + '.' if where else ''}{unknown[0]}")
    if cls is SimConfig:
        try:
            return SimConfig.from_dict(d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}") from None
    kwargs = {}
    for name, value in d.items():
        tp = hints.get(name)
        path = f"{where}.{name}" if where else name
        if _is_dataclass_type(tp):
            kwargs[name] = dataclass_from_dict(tp, value, path)
        elif isinstance(value, list) and isinstance(getattr(cls(), name, None), tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or cls.__name__}: {exc}") from None


def to_plain(obj):
    """Dataclass tree to JSON-ready dicts and lists."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_plain(v) for k, v in obj.items()}
    return obj


@dataclass
class RunConfig:
    # overrides simulator.master_seed and model.seed when set
    seed: Optional[int] = None
    simulator: SimConfig = field(default_factory=SimConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train_days: int = 10  # conversations dated before start + train_days form the training split
    jobs: int = 1  # simulator worker processes
    threads: Optional[int] = None  # BLAS threads; None leaves the library default
    n_resamples: int = 10_000
    ablation_variant: str = "cts-rnn"
    ablation_contexts: tuple = (1, 3, 5)
    ablation_groups: tuple = ("none", "topical", "user-profile", "all", "+cf")

    def __post_init__(self):
        if self.seed is not None:
            self.apply_seed(self.seed)
        if self.train_days < 1:
            raise ConfigError("train_days must be positive")

    def apply_seed(self, seed: int) -> "RunConfig":
        self.seed = seed
        self.simulator.master_seed = seed
        self.model.seed = seed
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return dataclass_from_dict(cls, d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def model_config_from_dict(d: dict) -> ModelConfig:
    return dataclass_from_dict(ModelConfig, d, "model")
