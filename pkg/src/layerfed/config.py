"""Experiment configuration files.

Configs are INI files with the sections ``experiment``, ``dataset``, ``model``,
``partition``, ``federation`` and ``grid``. Lists are comma separated. Unknown
sections or keys are rejected with the line they appear on.
"""

from __future__ import annotations

import configparser
import itertools
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any

from .errors import ConfigError, ConfigurationError
from .federation import AggregationRule, FederationHyperparams
from .partition import LayerGroup, PartitionError, check_tag_order, tags_from_counts


class ScenarioKind(str, Enum):
    CENTRALIZED_SEPARATE = "centralized_separate"
    CENTRALIZED_JOINT = "centralized_joint"
    DISTRIBUTED_SEPARATE = "distributed_separate"
    DISTRIBUTED_SEPARATE_FL = "distributed_separate_fl"
    DISTRIBUTED_MULTITASK_FL = "distributed_multitask_fl"

    @classmethod
    def parse(cls, value) -> "ScenarioKind":
        if isinstance(value, cls):
            return value
        key = re.sub(r"(?<=[a-z])(?=[A-Z])", "_", str(value).strip()).lower().replace("-", "_")
        key = key.replace("multi_task", "multitask")
        try:
            return cls(key)
        except ValueError:
            raise ConfigurationError(f"unknown scenario {value!r}") from None

    @property
    def label(self) -> str:
        return {
            "centralized_separate": "Centralized Separate",
            "centralized_joint": "Centralized Joint",
            "distributed_separate": "Distributed Separate",
            "distributed_separate_fl": "Distributed Separate FL",
            "distributed_multitask_fl": "Distributed Multi-Task FL",
        }[self.value]


# trainable groups each scenario may use (a pretrained prefix is always allowed)
SCENARIO_GROUPS = {
    ScenarioKind.CENTRALIZED_SEPARATE: {LayerGroup.COMMON},
    ScenarioKind.CENTRALIZED_JOINT: {LayerGroup.COMMON},
    ScenarioKind.DISTRIBUTED_SEPARATE: {LayerGroup.PERSONAL},
    ScenarioKind.DISTRIBUTED_SEPARATE_FL: {LayerGroup.COMMON},
    ScenarioKind.DISTRIBUTED_MULTITASK_FL: {LayerGroup.COMMON, LayerGroup.TASK, LayerGroup.PERSONAL},
}

DEFAULT_LR_GRID = (0.3, 0.1, 0.03, 0.01, 0.003)


@dataclass
class DatasetConfig:
    source: str = "synthetic"
    # synthetic
    n_samples: int = 20000
    latent_dim: int = 8
    feature_dim: int = 32
    n_tasks: int = 5
    rule: str = "linear"
    label_noise: float = 0.0
    task_similarity: float = 0.5
    feature_noise: float = 0.0
    seed: int | None = None
    # tabular / har
    path: str | None = None
    delimiter: str | None = None
    label_columns: list[int] = field(default_factory=list)
    label_kind: str = "binary"
    n_classes: int = 2
    subject_column: int | None = None
    # frozen extractor outputs replacing the raw features
    embeddings: str | None = None
    # client topology
    partition: str | None = None
    clients: int = 100
    test_fraction: float = 0.2


@dataclass
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [64, 32])
    hidden_activation: str = "relu"
    output_activation: str = "auto"


@dataclass
class PartitionConfig:
    pretrained: int = 0
    common: int | None = None
    personal: int = 0
    tags: list[LayerGroup] | None = None

    def tags_for(self, scenario: ScenarioKind, n_layers: int) -> list[LayerGroup]:
        """Layer tags used by ``scenario`` for an ``n_layers``-layer network."""
        if self.tags is not None:
            if len(self.tags) != n_layers:
                raise PartitionError(f"{len(self.tags)} tags for a {n_layers}-layer network")
            return list(self.tags)
        trainable = n_layers - self.pretrained
        if trainable < 1:
            raise PartitionError(f"{self.pretrained} pretrained layers leave nothing to train")
        if scenario is ScenarioKind.DISTRIBUTED_MULTITASK_FL:
            # default: the first two trainable layers are common
            common = self.common if self.common is not None else min(2, trainable - self.personal)
            task = trainable - common - self.personal
            if task < 0:
                raise PartitionError(
                    f"common={common} + personal={self.personal} exceed {trainable} trainable layers")
            return tags_from_counts(self.pretrained, common, task, self.personal)
        group = next(iter(SCENARIO_GROUPS[scenario]))
        return [LayerGroup.PRETRAINED] * self.pretrained + [group] * trainable


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    scenarios: list[ScenarioKind] = field(
        default_factory=lambda: [ScenarioKind.DISTRIBUTED_MULTITASK_FL])
    seed: int = 0
    output_dir: str = "runs"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    federation: FederationHyperparams = field(default_factory=FederationHyperparams)
    grid: dict[str, list] = field(default_factory=dict)
    source_path: str | None = None

    @property
    def n_layers(self) -> int:
        return len(self.model.hidden) + 1

    def grid_points(self) -> list[dict[str, Any]]:
        """Cartesian product of the grid, first key varying slowest.

        Learning rates not listed in the grid default to ``DEFAULT_LR_GRID``.
        """
        grid = self.grid
        if "learning_rate" not in grid:
            grid = {"learning_rate": list(DEFAULT_LR_GRID), **grid}
        keys = list(grid)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]

    def hyperparams(self, overrides: dict[str, Any] | None = None, seed: int | None = None) -> FederationHyperparams:
        hp = replace(self.federation, **(overrides or {}))
        if seed is not None:
            hp = replace(hp, seed=seed)
        return hp

    def validate(self) -> "ExperimentConfig":
        for scenario in self.scenarios:
            tags = self.partition.tags_for(scenario, self.n_layers)
            check_tag_order(tags)
            allowed = SCENARIO_GROUPS[scenario] | {LayerGroup.PRETRAINED}
            if self.partition.tags is not None:
                bad = sorted({t for t in tags if t not in allowed})
                if bad:
                    raise ConfigError(
                        f"scenario {scenario.value} does not allow "
                        f"{', '.join(t.name.lower() for t in bad)} layers", key="partition.tags")
        for key, values in self.grid.items():
            if not values:
                raise ConfigError("grid values must be non-empty", key=f"grid.{key}")
        return self


# -- parsing -------------------------------------------------------------------

_DATASET_KINDS = {
    "source": str, "n_samples": int, "latent_dim": int, "feature_dim": int, "n_tasks": int,
    "rule": str, "label_noise": float, "task_similarity": float, "feature_noise": float,
    "seed": int, "path": str, "delimiter": str, "label_columns": "intlist", "label_kind": str,
    "n_classes": int, "subject_column": int, "embeddings": str, "partition": str,
    "clients": int, "test_fraction": float,
}

_SECTION_TYPES = {
    "experiment": {"name": str, "scenario": "scenarios", "scenarios": "scenarios", "seed": int,
                   "output_dir": str},
    "dataset": _DATASET_KINDS,
    "model": {"hidden": "intlist", "hidden_activation": str, "output_activation": str},
    "partition": {"pretrained": int, "common": int, "personal": int, "tags": "tags"},
    "federation": {"rounds": int, "clients_per_group": int, "local_epochs": int,
                   "batch_size": int, "learning_rate": float, "aggregation": str, "seed": int},
    "grid": {"learning_rate": "floatlist", "local_epochs": "intlist", "batch_size": "intlist",
             "clients_per_group": "intlist", "aggregation": "strlist"},
}



def _line_index(text: str) -> dict[tuple[str, str], int]:
    index = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"^\[([^\]]+)\]", stripped)
        if m:
            section = m.group(1).strip().lower()
            index[(section, "")] = lineno
            continue
        m = re.match(r"^([^=:#;\s][^=:]*?)\s*[=:]", stripped)
        if m and section is not None:
            index[(section, m.group(1).strip().lower())] = lineno
    return index


def _split_list(raw: str) -> list[str]:
    return [p.strip() for p in raw.replace("\n", ",").split(",") if p.strip()]


def _convert(kind, raw: str):
    if kind is str or kind == "str":
        return raw.strip()
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind == "intlist":
        return [int(v) for v in _split_list(raw)]
    if kind == "floatlist":
        return [float(v) for v in _split_list(raw)]
    if kind == "strlist":
        return _split_list(raw)
    if kind == "tags":
        return [LayerGroup.parse(v) for v in _split_list(raw)]
    if kind == "scenarios":
        return [ScenarioKind.parse(v) for v in _split_list(raw)]
    raise AssertionError(kind)


def parse_config_text(text: str, source: str | None = None) -> ExperimentConfig:
    lines = _line_index(text)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source or "<config>")
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}", line=getattr(exc, "lineno", None)) from exc

    values: dict[str, dict[str, Any]] = {}
    for section in parser.sections():
        sec = section.strip().lower()
        if sec not in _SECTION_TYPES:
            raise ConfigError("unknown section", key=sec, line=lines.get((sec, "")))
        values[sec] = {}
        for key, raw in parser.items(section):
            line = lines.get((sec, key))
            kind = _SECTION_TYPES[sec].get(key)
            if kind is None:
                raise ConfigError("unknown key", key=f"{sec}.{key}", line=line)
            try:
                values[sec][key] = _convert(kind, raw)
            except (ValueError, ConfigurationError) as exc:
                raise ConfigError(f"invalid value {raw!r}: {exc}", key=f"{sec}.{key}", line=line) from None

    def build(sec, ctor, **extra):
        try:
            return ctor(**values.get(sec, {}), **extra)
        except (ConfigurationError, ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc), key=sec, line=lines.get((sec, ""))) from None

    exp = dict(values.get("experiment", {}))
    if "scenario" in exp:
        exp["scenarios"] = exp.pop("scenario")
    fed = dict(values.get("federation", {}))
    fed.setdefault("seed", exp.get("seed", 0))
    values["federation"] = fed
    grid = values.get("grid", {})
    if "aggregation" in grid:
        grid["aggregation"] = [AggregationRule(v) for v in grid["aggregation"]]

    cfg = ExperimentConfig(
        name=exp.get("name", "experiment"),
        scenarios=exp.get("scenarios", [ScenarioKind.DISTRIBUTED_MULTITASK_FL]),
        seed=exp.get("seed", 0),
        output_dir=exp.get("output_dir", "runs"),
        dataset=build("dataset", DatasetConfig),
        model=build("model", ModelConfig),
        partition=build("partition", PartitionConfig),
        federation=build("federation", FederationHyperparams),
        grid=grid,
        source_path=source,
    )
    try:
        return cfg.validate()
    except ConfigError as exc:
        if exc.line is None and exc.key:
            sec, _, key = exc.key.partition(".")
            exc = ConfigError(str(exc).split("] ", 1)[-1], key=exc.key, line=lines.get((sec, key)))
        raise exc from None
    except ConfigurationError as exc:
        raise ConfigError(str(exc), key="partition", line=lines.get(("partition", ""))) from None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))
