"""Scenario orchestration, grid search and result files."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import nn
from .config import ExperimentConfig, ScenarioKind
from .data import (Shard, SyntheticConfig, TabularDataset, TabularSchema,
                   find_har_root, gen_synthetic_multitask, load_frozen_embeddings, load_har,
                   load_tabular, partition_by_subject, partition_uniform)
from .errors import ConfigurationError, DivergedClientError, LayerFedError
from .federation import FederationHyperparams, MetricsLog, init_federation, run_training
from .partition import LayerGroup, build_partitioned_model

log = logging.getLogger(__name__)


# -- data ---------------------------------------------------------------------

@dataclass
class PreparedData:
    dataset: TabularDataset
    shards: list[Shard]

    @property
    def task_names(self) -> dict[int, str]:
        return {s.task_id: s.task_name for s in sorted(self.shards, key=lambda s: s.task_id)}


def load_dataset(cfg: ExperimentConfig) -> TabularDataset:
    ds = cfg.dataset
    if ds.source == "synthetic":
        dataset = gen_synthetic_multitask(SyntheticConfig(
            n_samples=ds.n_samples, latent_dim=ds.latent_dim, feature_dim=ds.feature_dim,
            n_tasks=ds.n_tasks, rule=ds.rule, label_noise=ds.label_noise,
            task_similarity=ds.task_similarity, feature_noise=ds.feature_noise,
            seed=cfg.seed if ds.seed is None else ds.seed,
        ))
    elif ds.source == "har":
        root = find_har_root(ds.path)
        if root is None:
            raise ConfigurationError(
                f"HAR dataset not found (looked at {ds.path!r} and $HAR_DATASET_DIR)")
        dataset = load_har(root, "all")
    elif ds.source == "tabular":
        if not ds.path:
            raise ConfigurationError("dataset.path is required for tabular sources")
        dataset = load_tabular(ds.path, TabularSchema(
            delimiter=ds.delimiter, label_columns=ds.label_columns, label_kind=ds.label_kind,
            n_classes=ds.n_classes, label_base=0 if ds.label_kind == "categorical" else 1,
            subject_column=ds.subject_column,
        ))
    else:
        raise ConfigurationError(f"unknown dataset source {ds.source!r}")
    if ds.embeddings:
        dataset = load_frozen_embeddings(ds.embeddings, dataset.n).apply(dataset)
    return dataset


def prepare_data(cfg: ExperimentConfig, dataset: TabularDataset | None = None) -> PreparedData:
    dataset = dataset if dataset is not None else load_dataset(cfg)
    ds = cfg.dataset
    policy = ds.partition or ("by_subject" if ds.source == "har" else "uniform")
    if policy == "uniform":
        shards = partition_uniform(dataset, ds.clients, len(dataset.task_names),
                                   cfg.seed, ds.test_fraction)
    elif policy == "by_subject":
        shards = partition_by_subject(dataset, ds.test_fraction, cfg.seed)
    else:
        raise ConfigurationError(f"unknown partition policy {policy!r}")
    return PreparedData(dataset, shards)


# -- scenarios ----------------------------------------------------------------

def _output_activation(cfg: ExperimentConfig, width: int) -> str:
    act = cfg.model.output_activation
    if act == "auto":
        return "sigmoid" if width == 1 else "softmax"
    return act


def _specs(cfg: ExperimentConfig, input_dim: int, width: int, output_activation: str):
    widths = list(cfg.model.hidden) + [width]
    acts = [cfg.model.hidden_activation] * len(cfg.model.hidden) + [output_activation]
    return nn.layer_specs(input_dim, widths, acts)


def _model(cfg, hp, input_dim, width, tags, output_activation=None):
    specs = _specs(cfg, input_dim, width, output_activation or _output_activation(cfg, width))
    return build_partitioned_model(specs, tags, hp.seed)


def _pooled_shard(data: PreparedData, label_names: Sequence[str], task_id: int, name: str) -> Shard:
    """All clients' rows on one machine, keeping every shard's train/test assignment."""
    ordered = sorted(data.shards, key=lambda s: s.client_id)
    train = np.concatenate([s.train_rows for s in ordered])
    test = np.concatenate([s.test_rows for s in ordered])
    y = data.dataset.label_matrix(label_names)
    x = data.dataset.features
    return Shard(0, task_id, name, x[train], y[train], x[test], y[test], train, test)


def _label_column(data: PreparedData, task_id: int) -> str:
    for s in data.shards:
        if s.task_id == task_id:
            if s.task_name in data.dataset.labels:
                return s.task_name
            break
    return data.dataset.task_names[0]


def _distinct_labels(data: PreparedData) -> list[tuple[int, str]]:
    """(task id, label column) for each distinct label column, in task order."""
    seen: dict[str, int] = {}
    for t in sorted({s.task_id for s in data.shards}):
        seen.setdefault(_label_column(data, t), t)
    return [(t, name) for name, t in seen.items()]


def _as_personal(tags):
    return [t if t is LayerGroup.PRETRAINED else LayerGroup.PERSONAL for t in tags]


def _federation_runs(cfg: ExperimentConfig, scenario: ScenarioKind, data: PreparedData,
                     hp: FederationHyperparams):
    """Yield (server, clients, hp, task_names) for each independent training run."""
    tags = cfg.partition.tags_for(scenario, cfg.n_layers)
    d = data.dataset.d
    names = data.task_names
    groups: dict[int, list[Shard]] = {}
    for s in data.shards:
        groups.setdefault(s.task_id, []).append(s)

    if scenario is ScenarioKind.CENTRALIZED_SEPARATE:
        # single machine: nothing is aggregated, so trainable layers stay local
        for task, label in _distinct_labels(data):
            shard = _pooled_shard(data, [label], task, label)
            model = _model(cfg, hp, d, shard.train_y.shape[1], _as_personal(tags))
            server, clients = init_federation(model, [shard])
            yield server, clients, replace(hp, clients_per_group=1), {task: label}

    elif scenario is ScenarioKind.CENTRALIZED_JOINT:
        labels = _distinct_labels(data)
        label_names = [name for _, name in labels]
        shard = _pooled_shard(data, label_names, labels[0][0], "+".join(label_names))
        width = shard.train_y.shape[1]
        if len(labels) > 1:
            if any(data.dataset.labels[n].shape[1] != 1 for n in label_names):
                raise ConfigurationError("joint training of several tasks needs binary labels")
            act = "sigmoid"
        else:
            act = _output_activation(cfg, width)
        model = _model(cfg, hp, d, width, _as_personal(tags), act)
        server, clients = init_federation(model, [shard])
        if len(labels) > 1:
            clients[0].column_tasks = tuple(t for t, _ in labels)
        yield server, clients, replace(hp, clients_per_group=1), {t: n for t, n in labels}

    elif scenario is ScenarioKind.DISTRIBUTED_SEPARATE:
        sizes = {len(v) for v in groups.values()}
        if len(sizes) != 1:
            raise ConfigurationError("distributed separate training needs equal task groups")
        width = data.shards[0].train_y.shape[1]
        model = _model(cfg, hp, d, width, tags)
        server, clients = init_federation(model, data.shards)
        yield server, clients, replace(hp, clients_per_group=sizes.pop()), names

    elif scenario is ScenarioKind.DISTRIBUTED_SEPARATE_FL:
        for task in sorted(groups):
            shards = groups[task]
            model = _model(cfg, hp, d, shards[0].train_y.shape[1], tags)
            server, clients = init_federation(model, shards)
            yield server, clients, _capped(hp, len(shards)), {task: names[task]}

    else:
        width = data.shards[0].train_y.shape[1]
        model = _model(cfg, hp, d, width, tags)
        server, clients = init_federation(model, data.shards)
        yield server, clients, _capped(hp, min(len(v) for v in groups.values())), names


def _capped(hp: FederationHyperparams, group_size: int) -> FederationHyperparams:
    if hp.clients_per_group > group_size:
        raise ConfigurationError(
            f"clients_per_group={hp.clients_per_group} exceeds task group size {group_size}")
    return hp


def run_scenario(cfg: ExperimentConfig, scenario: ScenarioKind | str | None = None,
                 hp: FederationHyperparams | None = None,
                 data: PreparedData | None = None) -> MetricsLog:
    """Train one scenario and return its per-round metrics."""
    scenario = ScenarioKind.parse(scenario) if scenario is not None else cfg.scenarios[0]
    hp = hp or cfg.hyperparams()
    data = data or prepare_data(cfg)
    logs = [run_training(server, clients, run_hp, task_names=names)
            for server, clients, run_hp, names in _federation_runs(cfg, scenario, data, hp)]
    return MetricsLog.merge(logs, label=scenario.value)


# -- grid search --------------------------------------------------------------

@dataclass
class GridRow:
    scenario: str
    index: int
    params: dict[str, Any]
    seed: int
    status: str
    final_accuracy: float
    directory: str = ""
    selected: bool = False


@dataclass
class GridResult:
    rows: list[GridRow] = field(default_factory=list)
    best: dict[str, GridRow] = field(default_factory=dict)
    logs: dict[tuple[str, int], MetricsLog] = field(default_factory=dict)

    def best_log(self, scenario) -> MetricsLog:
        scenario = ScenarioKind.parse(scenario).value
        return self.logs[(scenario, self.best[scenario].index)]


def _point_label(index: int, params: dict[str, Any]) -> str:
    parts = [f"{k}={getattr(v, 'value', v)}" for k, v in params.items()]
    return f"p{index:03d}" + ("_" + "_".join(parts) if parts else "")


def _run_point(cfg, scenario, index, params, seed, data):
    hp = cfg.hyperparams(params, seed=seed)
    try:
        return run_scenario(cfg, scenario, hp, data)
    except DivergedClientError as exc:
        log.warning("%s point %d diverged: %s", scenario.value, index, exc)
        return MetricsLog(label=scenario.value, status="diverged")


def _run_point_job(args):
    cfg, scenario, index, params, seed = args
    return _run_point(cfg, scenario, index, params, seed, None)


def grid_search(cfg: ExperimentConfig, output_dir=None, jobs: int = 1,
                data: PreparedData | None = None) -> GridResult:
    """Run every grid point of every scenario; keep the best final accuracy per scenario.

    Point ``i`` runs with seed ``cfg.federation.seed + i``; data and client partition use
    ``cfg.seed`` throughout so all points see the same shards.
    """
    points = cfg.grid_points()
    jobs_list = [(cfg, s, i, p, cfg.federation.seed + i)
                 for s in cfg.scenarios for i, p in enumerate(points)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            logs = list(pool.map(_run_point_job, jobs_list))
    else:
        data = data or prepare_data(cfg)
        logs = [_run_point(c, s, i, p, seed, data) for c, s, i, p, seed in jobs_list]

    result = GridResult()
    out = Path(output_dir) if output_dir is not None else None
    for (c, scenario, index, params, seed), mlog in zip(jobs_list, logs):
        row = GridRow(scenario.value, index, params, seed, mlog.status, mlog.final_accuracy)
        if out is not None and mlog.records:
            point_dir = out / scenario.value / _point_label(index, params)
            write_metrics(mlog, point_dir)
            row.directory = str(point_dir)
        result.rows.append(row)
        result.logs[(scenario.value, index)] = mlog
    for scenario in cfg.scenarios:
        candidates = [r for r in result.rows
                      if r.scenario == scenario.value and r.status == "ok" and np.isfinite(r.final_accuracy)]
        if candidates:
            # ties go to the earlier grid point
            best = max(candidates, key=lambda r: (r.final_accuracy, -r.index))
            best.selected = True
            result.best[scenario.value] = best
    if out is not None:
        write_grid_table(result, out)
    return result


# -- files ----------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def metrics_csv(mlog: MetricsLog) -> str:
    tasks = sorted(mlog.task_names) if mlog.task_names else sorted(mlog.records[0].tasks)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["round", "accuracy", "loss"]
    for t in tasks:
        name = mlog.task_names.get(t, f"task{t}")
        header += [f"accuracy[{name}]", f"loss[{name}]"]
    w.writerow(header)
    for rec in mlog.records:
        row = [rec.round, _fmt(rec.accuracy), _fmt(rec.loss)]
        for t in tasks:
            s = rec.tasks.get(t)
            row += [_fmt(s.accuracy), _fmt(s.loss)] if s else ["", ""]
        w.writerow(row)
    return buf.getvalue()


def write_metrics(mlog: MetricsLog, directory) -> Path:
    """Write ``metrics.csv`` (deterministic) and ``timing.json`` (wall clock) into ``directory``."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "metrics.csv"
        path.write_text(metrics_csv(mlog))
        (directory / "timing.json").write_text(json.dumps(
            {"round_seconds": mlog.wall_clock, "total_seconds": mlog.total_seconds}, indent=2))
    except OSError as exc:
        raise LayerFedError(f"cannot write metrics to {directory}: {exc}") from exc
    return path


def read_metrics(path) -> "ScenarioSummary":
    """Summarise a ``metrics.csv`` file by its last round."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise LayerFedError(f"{path}: no rounds recorded")
    header, last = rows[0], rows[-1]
    tasks = {}
    for col, value in zip(header, last):
        if col.startswith("accuracy[") and value:
            tasks[col[len("accuracy["):-1]] = float(value)
    seconds = float("nan")
    timing = path.parent / "timing.json"
    if timing.exists():
        seconds = json.loads(timing.read_text())["total_seconds"]
    return ScenarioSummary(path.parent.name, float(last[1]), tasks, int(last[0]), seconds)


@dataclass
class ScenarioSummary:
    label: str
    accuracy: float
    task_accuracy: dict[str, float]
    rounds: int
    seconds: float = float("nan")

    @classmethod
    def from_log(cls, label: str, mlog: MetricsLog) -> "ScenarioSummary":
        rec = mlog.final
        tasks = {mlog.task_names.get(t, f"task{t}"): s.accuracy for t, s in rec.tasks.items()}
        return cls(label, rec.accuracy, tasks, rec.round, mlog.total_seconds)


def write_grid_table(result: GridResult, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    keys = sorted({k for r in result.rows for k in r.params})
    path = directory / "grid.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "point", *keys, "seed", "status", "final_accuracy", "selected"])
        for r in result.rows:
            w.writerow([r.scenario, r.index,
                        *[getattr(r.params.get(k), "value", r.params.get(k, "")) for k in keys],
                        r.seed, r.status, _fmt(r.final_accuracy), int(r.selected)])
    return path


def write_report(summaries: Sequence[ScenarioSummary], directory) -> tuple[Path, Path]:
    """Scenario x task accuracy table as ``report.json`` and ``report.txt``."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        tasks: list[str] = []
        for s in summaries:
            for t in s.task_accuracy:
                if t not in tasks:
                    tasks.append(t)
        payload = {
            "tasks": tasks,
            "scenarios": [
                {"scenario": s.label, "rounds": s.rounds, "accuracy": s.accuracy,
                 "task_accuracy": s.task_accuracy, "wall_clock_seconds": s.seconds}
                for s in summaries
            ],
        }
        jpath = directory / "report.json"
        jpath.write_text(json.dumps(payload, indent=2))
        width = max([len("Case")] + [len(s.label) for s in summaries])
        lines = ["Test accuracy (%) per case and task", ""]
        head = f"{'Case':<{width}}  " + "  ".join(f"{t:>10}" for t in tasks) + f"  {'Overall':>8}  {'Seconds':>8}"
        lines += [head, "-" * len(head)]
        for s in summaries:
            cells = "  ".join(
                f"{100 * s.task_accuracy[t]:>10.2f}" if t in s.task_accuracy else f"{'':>10}" for t in tasks)
            lines.append(f"{s.label:<{width}}  {cells}  {100 * s.accuracy:>8.2f}  {s.seconds:>8.1f}")
        tpath = directory / "report.txt"
        tpath.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise LayerFedError(f"cannot write report to {directory}: {exc}") from exc
    return jpath, tpath


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> dict[str, MetricsLog]:
    """Run every configured scenario once with the base hyperparameters and write results."""
    out = Path(output_dir or cfg.output_dir)
    data = prepare_data(cfg)
    logs = {}
    for scenario in cfg.scenarios:
        mlog = run_scenario(cfg, scenario, data=data)
        write_metrics(mlog, out / scenario.value)
        logs[scenario.value] = mlog
    write_report([ScenarioSummary.from_log(ScenarioKind(k).label, v) for k, v in logs.items()], out)
    return logs
