"""Datasets, client shards and frozen-embedding stages."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, IngestionError, ParseError

log = logging.getLogger(__name__)

HAR_ACTIVITIES = (
    "walking", "walking_upstairs", "walking_downstairs", "sitting", "standing", "laying",
)


@dataclass
class TabularDataset:
    features: np.ndarray
    labels: dict[str, np.ndarray]
    subject_ids: np.ndarray | None = None
    task_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise IngestionError(f"features must be 2-D, got {self.features.shape}")
        n = self.features.shape[0]
        if not self.task_names:
            self.task_names = list(self.labels)
        for name in self.task_names:
            if name not in self.labels:
                raise IngestionError(f"no label column for task {name!r}")
        for name, col in self.labels.items():
            col = np.asarray(col, dtype=np.float64)
            if col.ndim == 1:
                col = col[:, None]
            if col.shape[0] != n:
                raise IngestionError(f"label column {name!r} has {col.shape[0]} rows, features have {n}")
            self.labels[name] = col
        if self.subject_ids is not None:
            self.subject_ids = np.asarray(self.subject_ids)
            if self.subject_ids.shape != (n,):
                raise IngestionError(f"subject ids shape {self.subject_ids.shape} != ({n},)")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def label_matrix(self, names: Sequence[str] | None = None) -> np.ndarray:
        """Label columns of ``names`` side by side (all tasks by default)."""
        names = list(names) if names is not None else self.task_names
        return np.hstack([self.labels[n] for n in names])


@dataclass
class Shard:
    """One client's private data, holding only the labels of its own task."""

    client_id: int
    task_id: int
    task_name: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    train_rows: np.ndarray
    test_rows: np.ndarray

    @property
    def n_train(self) -> int:
        return len(self.train_rows)

    @property
    def n_test(self) -> int:
        return len(self.test_rows)


# -- synthetic multi-task data ----------------------------------------------

@dataclass
class SyntheticConfig:
    n_samples: int = 20000
    latent_dim: int = 8
    feature_dim: int = 32
    n_tasks: int = 5
    rule: str = "linear"
    label_noise: float = 0.0
    seed: int = 0
    # fraction of each task's rule shared with the other tasks
    task_similarity: float = 0.5
    rule_hidden: int = 8
    feature_noise: float = 0.0

    def __post_init__(self):
        for name in ("n_samples", "latent_dim", "feature_dim", "n_tasks", "rule_hidden"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if not 0.0 <= self.label_noise < 0.5:
            raise ConfigurationError(f"label_noise must lie in [0, 0.5), got {self.label_noise}")
        if not 0.0 <= self.task_similarity <= 1.0:
            raise ConfigurationError("task_similarity must lie in [0, 1]")
        if self.rule not in ("linear", "nonlinear"):
            raise ConfigurationError(f"unknown task rule {self.rule!r}")
        if self.feature_noise < 0:
            raise ConfigurationError("feature_noise must be non-negative")


def _task_scores(cfg: SyntheticConfig, rng, z):
    """Zero-bias task scores from the latent factor; one column per task."""
    shared = np.sqrt(cfg.task_similarity)
    own = np.sqrt(1.0 - cfg.task_similarity)
    if cfg.rule == "linear":
        base = rng.normal(size=cfg.latent_dim)
        w = np.stack([shared * base + own * rng.normal(size=cfg.latent_dim)
                      for _ in range(cfg.n_tasks)], axis=1)
        return z @ w
    base_u = rng.normal(size=(cfg.rule_hidden, cfg.latent_dim))
    cols = []
    for _ in range(cfg.n_tasks):
        u = shared * base_u + own * rng.normal(size=base_u.shape)
        v = rng.normal(size=cfg.rule_hidden)
        cols.append(np.tanh(z @ u.T / np.sqrt(cfg.latent_dim)) @ v)
    return np.stack(cols, axis=1)


def gen_synthetic_multitask(cfg: SyntheticConfig) -> TabularDataset:
    """Binary multi-task data whose tasks all read one shared latent factor.

    Features are a fixed random linear map of the latent factor, standardised
    per column. Each task label thresholds a task-specific rule of the latent
    factor at zero, then flips with probability ``label_noise``.
    """
    rng = np.random.default_rng(cfg.seed)
    mixing = rng.normal(size=(cfg.feature_dim, cfg.latent_dim)) / np.sqrt(cfg.latent_dim)
    z = rng.normal(size=(cfg.n_samples, cfg.latent_dim))
    x = z @ mixing.T
    if cfg.feature_noise > 0:
        x = x + cfg.feature_noise * rng.normal(size=x.shape)
    scores = _task_scores(cfg, rng, z)
    y = (scores > 0).astype(np.float64)
    if cfg.label_noise > 0:
        flip = rng.random(y.shape) < cfg.label_noise
        y = np.where(flip, 1.0 - y, y)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    x = (x - x.mean(axis=0)) / std
    names = [f"task{t}" for t in range(cfg.n_tasks)]
    return TabularDataset(x, {name: y[:, t] for t, name in enumerate(names)}, None, names)


# -- delimited text ingestion ------------------------------------------------

@dataclass
class TabularSchema:
    """Column layout of a delimited numeric file.

    Labels and subject ids come either from columns of the main file or from
    one-value-per-line sidecar files (paths relative to the main file).
    """

    delimiter: str | None = None
    feature_columns: Sequence[int] | None = None
    label_columns: Sequence[int] = ()
    label_file: str | None = None
    subject_column: int | None = None
    subject_file: str | None = None
    label_kind: str = "categorical"
    n_classes: int = 6
    label_base: int = 1
    task_names: Sequence[str] = ()
    skip_header: int = 0


def _read_numeric(path: Path, delimiter: str | None, skip_header: int = 0) -> np.ndarray:
    try:
        text = path.read_text()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    rows = []
    width = None
    first_line = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if lineno <= skip_header or not line.strip():
            continue
        tokens = line.split(delimiter) if delimiter else line.split()
        try:
            values = np.array(tokens, dtype=np.float64)
        except ValueError:
            bad = next(t for t in tokens if not _is_float(t))
            raise ParseError(f"non-numeric field {bad.strip()!r}", path, lineno) from None
        if not np.isfinite(values).all():
            raise ParseError("non-finite value", path, lineno)
        if width is None:
            width, first_line = len(values), lineno
        elif len(values) != width:
            raise ParseError(
                f"{len(values)} fields, line {first_line} had {width}", path, lineno
            )
        rows.append(values)
    if not rows:
        raise ParseError("file contains no data rows", path)
    return np.vstack(rows)


def _is_float(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def _encode_labels(values: np.ndarray, schema: TabularSchema, path: Path, skip_header: int) -> np.ndarray:
    if schema.label_kind == "binary":
        bad = np.flatnonzero((values != 0) & (values != 1))
        if bad.size:
            raise ParseError(f"binary label {values[bad[0]]!r} not in {{0, 1}}", path, bad[0] + 1 + skip_header)
        return values.astype(np.float64)
    if schema.label_kind != "categorical":
        raise ConfigurationError(f"unknown label kind {schema.label_kind!r}")
    lo, hi = schema.label_base, schema.label_base + schema.n_classes - 1
    bad = np.flatnonzero((values != np.round(values)) | (values < lo) | (values > hi))
    if bad.size:
        raise ParseError(f"label {values[bad[0]]:g} outside {lo}..{hi}", path, bad[0] + 1 + skip_header)
    onehot = np.zeros((len(values), schema.n_classes))
    onehot[np.arange(len(values)), values.astype(int) - lo] = 1.0
    return onehot


def load_tabular(path, schema: TabularSchema) -> TabularDataset:
    """Parse a delimited numeric file (plus optional sidecars) into a dataset."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"no such file: {path}")
    table = _read_numeric(path, schema.delimiter, schema.skip_header)
    n, width = table.shape

    def sidecar(name):
        side = path.parent / name
        if not side.exists():
            raise IngestionError(f"no such file: {side}")
        col = _read_numeric(side, schema.delimiter)
        if col.shape[1] != 1:
            raise ParseError(f"expected one value per line, got {col.shape[1]}", side, 1)
        if col.shape[0] != n:
            raise ParseError(f"{col.shape[0]} rows but {path.name} has {n}", side)
        return side, col[:, 0]

    label_cols = list(schema.label_columns)
    used = set(label_cols)
    if schema.subject_column is not None:
        used.add(schema.subject_column)
    for c in used:
        if not -width <= c < width:
            raise ConfigurationError(f"column {c} out of range for {width}-column file {path}")
    if schema.feature_columns is None:
        feat_cols = [c for c in range(width) if c not in {u % width for u in used}]
    else:
        feat_cols = list(schema.feature_columns)
    features = table[:, feat_cols]

    labels: dict[str, np.ndarray] = {}
    names = list(schema.task_names)
    sources = []
    if schema.label_file:
        side, col = sidecar(schema.label_file)
        sources.append((side, col, 0))
    for c in label_cols:
        sources.append((path, table[:, c], schema.skip_header))
    if len(names) < len(sources):
        names += [f"label{i}" for i in range(len(names), len(sources))]
    for name, (src, values, skip) in zip(names, sources):
        labels[name] = _encode_labels(values, schema, src, skip)

    subjects = None
    if schema.subject_file:
        _, subj = sidecar(schema.subject_file)
        subjects = subj.astype(np.int64)
    elif schema.subject_column is not None:
        subjects = table[:, schema.subject_column].astype(np.int64)
    return TabularDataset(features, labels, subjects, names[: len(sources)])


def har_schema(partition: str) -> TabularSchema:
    return TabularSchema(
        label_file=f"y_{partition}.txt",
        subject_file=f"subject_{partition}.txt",
        label_kind="categorical",
        n_classes=len(HAR_ACTIVITIES),
        label_base=1,
        task_names=("activity",),
    )


def find_har_root(path=None) -> Path | None:
    """Locate an extracted ``UCI HAR Dataset`` directory, or return None."""
    candidates = []
    if path:
        candidates.append(Path(path))
    if os.environ.get("HAR_DATASET_DIR"):
        candidates.append(Path(os.environ["HAR_DATASET_DIR"]))
    candidates += [Path("data/UCI HAR Dataset"), Path.home() / "data" / "UCI HAR Dataset"]
    for c in candidates:
        if (c / "train" / "X_train.txt").exists():
            return c
    return None


def load_har(root, partition: str = "all") -> TabularDataset:
    """Load the smartphone HAR features (561 columns, 6 activities, 30 subjects).

    ``partition`` is ``"train"``, ``"test"`` or ``"all"`` (both, concatenated).
    """
    root = Path(root)
    if partition == "all":
        parts = [load_har(root, "train"), load_har(root, "test")]
        return TabularDataset(
            np.vstack([p.features for p in parts]),
            {"activity": np.vstack([p.labels["activity"] for p in parts])},
            np.concatenate([p.subject_ids for p in parts]),
            ["activity"],
        )
    if partition not in ("train", "test"):
        raise ConfigurationError(f"unknown HAR partition {partition!r}")
    return load_tabular(root / partition / f"X_{partition}.txt", har_schema(partition))


# -- partitioning -------------------------------------------------------------

def _split_rows(rows: np.ndarray, test_fraction: float):
    n = len(rows)
    n_test = int(round(n * test_fraction))
    if test_fraction > 0 and n >= 2:
        n_test = min(max(n_test, 1), n - 1)
    return rows[: n - n_test], rows[n - n_test:]


def _make_shard(dataset, client_id, task_id, task_name, label_name, train, test):
    y = dataset.labels[label_name]
    return Shard(
        client_id, task_id, task_name,
        dataset.features[train], y[train], dataset.features[test], y[test],
        train, test,
    )


def partition_uniform(dataset: TabularDataset, n_clients: int, n_tasks: int, seed: int,
                      test_fraction: float = 0.2) -> list[Shard]:
    """Deal shuffled rows evenly over ``n_clients``, grouped into ``n_tasks``.

    Clients ``[t*G, (t+1)*G)`` form task group ``t`` (``G = n_clients / n_tasks``)
    and see only the label column of task ``t``.
    """
    if n_clients <= 0 or n_tasks <= 0:
        raise ConfigurationError("client and task counts must be positive")
    if n_clients % n_tasks:
        raise ConfigurationError(
            f"{n_clients} clients cannot be split into {n_tasks} equal task groups"
        )
    if n_tasks > len(dataset.task_names):
        raise ConfigurationError(
            f"{n_tasks} task groups but the dataset has {len(dataset.task_names)} label columns"
        )
    if n_clients > dataset.n:
        raise ConfigurationError(f"{n_clients} clients for only {dataset.n} rows")
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigurationError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    order = np.random.default_rng(seed).permutation(dataset.n)
    group_size = n_clients // n_tasks
    shards = []
    for cid, rows in enumerate(np.array_split(order, n_clients)):
        task = cid // group_size
        name = dataset.task_names[task]
        train, test = _split_rows(rows, test_fraction)
        shards.append(_make_shard(dataset, cid, task, name, name, train, test))
    return shards


def partition_by_subject(dataset: TabularDataset, test_fraction: float = 0.2,
                         seed: int = 0, label: str | None = None) -> list[Shard]:
    """One client (and one task) per subject id, each with its own train/test split."""
    if dataset.subject_ids is None:
        raise ConfigurationError("dataset has no subject column")
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigurationError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    label = label or dataset.task_names[0]
    rng = np.random.default_rng(seed)
    shards = []
    for idx, subject in enumerate(np.unique(dataset.subject_ids)):
        rows = np.flatnonzero(dataset.subject_ids == subject)
        rows = rows[rng.permutation(len(rows))]
        train, test = _split_rows(rows, test_fraction)
        shards.append(_make_shard(dataset, idx, idx, f"subject{subject}", label, train, test))
    return shards


# -- frozen feature extractors -----------------------------------------------

@dataclass
class EmbeddingStage:
    """Precomputed outputs of a frozen feature extractor, row-aligned with a dataset.

    Stands in for a pretrained prefix: since the prefix never changes, its
    outputs can be computed once and looked up by row.
    """

    embeddings: np.ndarray

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def lookup(self, rows) -> np.ndarray:
        return self.embeddings[rows]

    def apply(self, dataset: TabularDataset) -> TabularDataset:
        if self.embeddings.shape[0] != dataset.n:
            raise IngestionError(
                f"embedding file has {self.embeddings.shape[0]} rows, dataset has {dataset.n}"
            )
        return replace(dataset, features=self.embeddings.copy(),
                       labels=dict(dataset.labels))


def load_frozen_embeddings(path, n_rows: int | None = None) -> EmbeddingStage:
    """Read a ``rows cols`` header followed by ``rows`` numeric lines."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise ParseError("empty embedding file", path)
    try:
        rows, cols = (int(v) for v in lines[0].split())
    except ValueError:
        raise ParseError("header must be two integers 'rows cols'", path, 1) from None
    data = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            values = np.array(line.split(), dtype=np.float64)
        except ValueError:
            raise ParseError("non-numeric field", path, lineno) from None
        if len(values) != cols:
            raise IngestionError(f"{path}:{lineno}: {len(values)} values, header declares {cols}")
        data.append(values)
    if len(data) != rows:
        raise IngestionError(f"{path}: {len(data)} rows, header declares {rows}")
    if n_rows is not None and rows != n_rows:
        raise IngestionError(f"{path}: {rows} rows, dataset has {n_rows}")
    emb = np.vstack(data) if data else np.zeros((0, cols))
    return EmbeddingStage(emb)


def write_embeddings(path, embeddings: np.ndarray) -> None:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write(f"{embeddings.shape[0]} {embeddings.shape[1]}\n")
        for row in embeddings:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
