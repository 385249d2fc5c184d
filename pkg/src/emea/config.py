"""Experiment configuration: a YAML document parsed strictly into dataclasses.

Unknown or misspelled keys raise :class:`ConfigError` before any work
starts. Command-line flags are merged on top via :func:`apply_overrides`.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints

import yaml

from .encoder import ConfigError

WORKDIR_ENV = "EMEA_WORKDIR"


@dataclass
class PathsConfig:
    workdir: str = "work"
    results: str = "results/results.jsonl"


@dataclass
class VarietyEntry:
    name: str
    role: str  # source | related | test
    parent: str | None = None
    divergence: float = 0.0

    def __post_init__(self):
        if self.role not in ("source", "related", "test"):
            raise ConfigError(f"variety {self.name!r}: role must be source, related or test")


@dataclass
class ContinuumConfig:
    group: str = "group1"
    lexicon_seed: int = 7
    vocab_size: int = 120
    seed: int = 1
    replacement_factor: float = 0.5
    varieties: list[VarietyEntry] = field(default_factory=list)

    def __post_init__(self):
        if not self.varieties:
            self.varieties = default_varieties()
        names = [v.name for v in self.varieties]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate variety names in {names}")
        roles = [v.role for v in self.varieties]
        if roles.count("source") != 1 or self.varieties[0].role != "source":
            raise ConfigError("the first variety must be the single source variety")
        for i, v in enumerate(self.varieties[1:], start=1):
            if v.parent not in names[:i]:
                raise ConfigError(f"variety {v.name!r}: parent {v.parent!r} must be listed before it")

    def names(self, role: str) -> list[str]:
        return [v.name for v in self.varieties if v.role == role]

    @property
    def source(self) -> str:
        return self.varieties[0].name


def default_varieties() -> list[VarietyEntry]:
    return [
        VarietyEntry("src", "source"),
        VarietyEntry("rel1", "related", "src", 0.15),
        VarietyEntry("rel2", "related", "src", 0.15),
        VarietyEntry("test1", "test", "rel1", 0.05),
        VarietyEntry("test2", "test", "rel2", 0.05),
        VarietyEntry("test3", "test", "src", 0.1),
    ]


@dataclass
class DataConfig:
    task: str = "ner"
    unlabeled_sentences: int = 3000
    labeled_train: int = 2000
    labeled_dev: int = 300
    test_sentences: int = 400
    vocab_min_count: int = 2
    related_pretrain_fraction: float = 1.0
    max_pieces: int = 6
    seed: int = 11

    def __post_init__(self):
        if self.task not in ("ner", "pos"):
            raise ConfigError(f"task must be 'ner' or 'pos', got {self.task!r}")
        if not 0 <= self.related_pretrain_fraction <= 1:
            raise ConfigError(f"related_pretrain_fraction must be in [0, 1], got {self.related_pretrain_fraction}")


@dataclass
class ModelSection:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    d_adapter: int = 8
    max_len: int = 128
    seed: int = 0


@dataclass
class PhaseConfig:
    epochs: int = 1
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    mask_rate: float = 0.15
    optimizer: str = "adam"
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    spell_rate: float = 0.0


@dataclass
class TrainSection:
    pretrain: PhaseConfig = field(default_factory=lambda: PhaseConfig(epochs=20, lr=1e-3))
    language_adapter: PhaseConfig = field(default_factory=lambda: PhaseConfig(epochs=4, lr=1e-3))
    task_adapter: PhaseConfig = field(default_factory=lambda: PhaseConfig(epochs=100, lr=1e-4))
    fusion: PhaseConfig = field(default_factory=lambda: PhaseConfig(epochs=5, lr=5e-5))
    budgeted: PhaseConfig = field(default_factory=lambda: PhaseConfig(epochs=2, lr=1e-3))


@dataclass
class EmeaSection:
    gamma: float = 10.0
    steps: int = 10
    entropy_reduction: str = "sum"
    share_alpha_across_layers: bool = True
    reset_per_batch: bool = True


@dataclass
class CLSection:
    lr: float = 2e-5
    steps: int = 1
    optimizer: str = "adam"
    reset_per_batch: bool = True


@dataclass
class EvalSection:
    batch_size: int = 32
    methods: list[str] = field(default_factory=lambda: ["en", "related", "cl", "fusion", "ensemble", "emea-s1", "emea-s10"])
    sweep_sizes: list[int] = field(default_factory=lambda: [1, 4, 16, 32])
    warmup_batches: int = 3
    bench_batches: int = 10


@dataclass
class BudgetSection:
    sizes: list[int] = field(default_factory=lambda: [1000, 10000, 50000])
    varieties: list[str] = field(default_factory=lambda: ["test1"])
    warm_start: str | None = None


@dataclass
class ExperimentConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    continuum: ContinuumConfig = field(default_factory=ContinuumConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    emea: EmeaSection = field(default_factory=EmeaSection)
    cl: CLSection = field(default_factory=CLSection)
    eval: EvalSection = field(default_factory=EvalSection)
    budget: BudgetSection = field(default_factory=BudgetSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Stable hash of the effective configuration."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def workdir(self) -> Path:
        return Path(self.paths.workdir)

    @property
    def results_path(self) -> Path:
        p = Path(self.paths.results)
        return p if p.is_absolute() else self.workdir / p


def _build(cls, data: Any, where: str):
    if dataclasses.is_dataclass(cls):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
        hints = get_type_hints(cls)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}")
        kwargs = {k: _build(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"{where or 'config'}: {exc}") from exc
    origin = getattr(cls, "__origin__", None)
    if origin is list:
        (inner,) = cls.__args__
        if not isinstance(data, list):
            raise ConfigError(f"{where}: expected a list")
        return [_build(inner, x, f"{where}[{i}]") for i, x in enumerate(data)]
    if cls is float and isinstance(data, int) and not isinstance(data, bool):
        return float(data)
    if cls in (int, float, str, bool):
        if not isinstance(data, cls) or (cls is int and isinstance(data, bool)):
            raise ConfigError(f"{where}: expected {cls.__name__}, got {data!r}")
        return data
    args = getattr(cls, "__args__", ())
    if type(None) in args:
        if data is None:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _build(inner, data, where)
    return data


def from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "")


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Parse a YAML config; ``None`` gives the defaults. Honors ``EMEA_WORKDIR``."""
    data: dict = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    cfg = from_dict(data)
    if os.environ.get(WORKDIR_ENV):
        cfg.paths.workdir = os.environ[WORKDIR_ENV]
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Set dotted keys (``emea.gamma``) and re-validate the whole document."""
    data = cfg.to_dict()
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        parts = dotted.split(".")
        for p in parts[:-1]:
            if p not in node:
                raise ConfigError(f"unknown config section {dotted!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[parts[-1]] = value
    return from_dict(data)
