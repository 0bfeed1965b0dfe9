"""Run configuration: a TOML document with ``[data]``, ``[model]``, ``[train]`` and ``[eval]`` sections."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .data import TASKS
from .evaluation import ABLATION_VARIANTS, DEFAULT_DELTAS
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    task: str | None = None
    csv: str | None = None
    dx: int = 1
    dy: int = 2
    n: int = 2000
    train_fraction: float | None = None
    kfold: int = 0

    def validate(self):
        if (self.task is None) == (self.csv is None):
            raise ConfigError("exactly one of data.task and data.csv must be set")
        if self.task is not None and self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {', '.join(TASKS)}")
        if self.n < 2 or self.dx < 1 or self.dy < 1:
            raise ConfigError("data.n must be >= 2 and dx, dy >= 1")
        if self.kfold == 1 or self.kfold < 0:
            raise ConfigError("data.kfold must be 0 (single split) or >= 2")
        if self.train_fraction is not None and not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("data.train_fraction must lie in (0, 1)")

    @property
    def is_toy(self) -> bool:
        return self.task is not None

    @property
    def split(self) -> float:
        # toy tasks use a 50/50 split, csv files 30/70 train/test
        if self.train_fraction is not None:
            return self.train_fraction
        return 0.5 if self.is_toy else 0.3


@dataclass
class ModelSection:
    mono_widths: list = field(default_factory=lambda: [16, 16, 1])
    cond_widths: list = field(default_factory=lambda: [8, 8, 2])
    groups: int = 32
    group_size: int = 32
    hidden_groups: int = 4
    hidden_group_size: int = 4
    batch_norm: bool = False


@dataclass
class EvalSection:
    x_values: list = field(default_factory=lambda: [-0.75, -0.25, 0.25, 0.75])
    grid: int = 50
    bins: int = 10
    deltas: list = field(default_factory=lambda: list(DEFAULT_DELTAS))
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    variants: list = field(default_factory=lambda: list(ABLATION_VARIANTS))


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"data": DataSection, "model": ModelSection, "train": TrainConfig, "eval": EvalSection}


def _build(cls, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def from_dict(doc: dict) -> RunConfig:
    top = {k: v for k, v in doc.items() if k not in _SECTIONS}
    unknown = sorted(set(top) - {"seed", "out"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "seed" in doc.get("train", {}):
        raise ConfigError("set the seed at top level, not in [train]")
    sections = {}
    for name, cls in _SECTIONS.items():
        val = doc.get(name, {})
        if not isinstance(val, dict):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = _build(cls, val, name)
    cfg = RunConfig(**top, **sections)
    cfg.train = dataclasses.replace(cfg.train, seed=int(cfg.seed))
    cfg.data.validate()
    return cfg


def load(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Read ``path`` (or start from defaults) and apply dotted-key ``overrides`` such as ``{"train.learning_rate": 0.01}``."""
    doc: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomli.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for key, val in (overrides or {}).items():
        node = doc
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = val
    return from_dict(doc)
