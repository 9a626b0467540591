"""Experiment configuration: nested dataclasses loaded from YAML with strict key checking."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .network import NetworkConfig
from .trainer import MODES, TrainConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


@dataclass
class DataConfig:
    task_count: int = 4
    clusters: list[int] | None = None
    epsilon: float = 0.1
    noise: float = 0.05
    out_dim: int = 4
    n_train: int = 512
    n_val: int = 1024
    # None: the run seed also seeds the teacher / backbone
    teacher_seed: int | None = None
    shared_shift: float = 1.0
    shared_rank: int = 4
    cluster_shift: float = 2.0
    cluster_rank: int = 3
    cluster_stages: list[int] = field(default_factory=lambda: [1])
    cluster_mode: str = "opposed"
    classification: list[int] = field(default_factory=list)
    teacher_head_hidden: int = 0


@dataclass
class SimilarityConfig:
    tune_steps: int = 200
    tune_lr: float = 1e-3
    tune_subset: int = 256
    n_examples: int = 128


@dataclass
class GroupingConfig:
    schedule: list[int] | None = None
    mode: str = "constrained"
    # explicit per-stage partitions; bypasses the similarity-based search
    stages: list[list[list[int]]] | None = None


@dataclass
class AblationConfig:
    swap: list[int] | None = None
    stages: list[int] | None = None


@dataclass
class CostConfig:
    schedules: list[list[int]] = field(default_factory=list)


@dataclass
class ExperimentConfig:
    experiment: str = "default"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    modes: list[str] = field(default_factory=lambda: list(MODES))
    data: DataConfig = field(default_factory=DataConfig)
    model: NetworkConfig = field(default_factory=NetworkConfig)
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    grouping: GroupingConfig = field(default_factory=GroupingConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    cost: CostConfig = field(default_factory=CostConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def _check(value, tp, path: str, problems: list[str]):
    """Coerce ``value`` to annotation ``tp``; record a problem on mismatch."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check(value, inner[0], path, problems)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            problems.append(f"{path}: expected a mapping")
            return tp()
        return _build(tp, value, path, problems)
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            problems.append(f"{path}: expected a list, got {type(value).__name__}")
            return value
        if origin is tuple:
            if len(value) != len(args):
                problems.append(f"{path}: expected {len(args)} items")
                return tuple(value)
            return tuple(_check(v, a, f"{path}[{i}]", problems) for i, (v, a) in enumerate(zip(value, args)))
        return [_check(v, args[0], f"{path}[{i}]", problems) for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            problems.append(f"{path}: expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{path}: expected a number, got {value!r}")
            return value
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            problems.append(f"{path}: expected a string")
        return value
    return value


def _build(cls, raw: dict, path: str, problems: list[str]):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            problems.append(f"{path + '.' if path else ''}{key}: unknown key")
    kwargs = {}
    for key, value in raw.items():
        if key in names:
            kwargs[key] = _check(value, hints[key], f"{path + '.' if path else ''}{key}", problems)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{path or 'config'}: {exc}")
        return cls()


def _semantic_checks(cfg: ExperimentConfig) -> list[str]:
    problems = []
    for m in cfg.modes:
        if m not in MODES:
            problems.append(f"modes: unknown mode {m!r}")
    if cfg.grouping.mode not in ("constrained", "unconstrained"):
        problems.append(f"grouping.mode: unknown mode {cfg.grouping.mode!r}")
    if cfg.model.rank_policy not in ("proportional", "per_group"):
        problems.append(f"model.rank_policy: unknown policy {cfg.model.rank_policy!r}")
    if cfg.data.clusters is not None and len(cfg.data.clusters) != cfg.data.task_count:
        problems.append("data.clusters: one label per task required")
    if cfg.grouping.schedule is not None and len(cfg.grouping.schedule) != cfg.model.stages:
        problems.append("grouping.schedule: one group count per stage required")
    if cfg.ablation.swap is not None and len(cfg.ablation.swap) != 2:
        problems.append("ablation.swap: exactly two task ids required")
    if any(s >= cfg.model.stages for s in cfg.data.cluster_stages):
        problems.append("data.cluster_stages: stage index out of range")
    if cfg.data.cluster_mode not in ("opposed", "independent"):
        problems.append(f"data.cluster_mode: unknown mode {cfg.data.cluster_mode!r}")
    if cfg.model.rank_policy == "proportional" and cfg.model.rank < cfg.data.task_count:
        problems.append("model.rank: proportional allocation needs rank >= data.task_count")
    if cfg.similarity.n_examples < 1:
        problems.append("similarity.n_examples: must be >= 1")
    return problems


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    problems: list[str] = []
    cfg = _build(ExperimentConfig, raw or {}, "", problems)
    if not problems:
        problems = _semantic_checks(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: {exc}"]) from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return config_from_dict(raw)
