"""Round-based federated training over layer-grouped models.

Each round the server samples ``K`` clients from every task group, broadcasts
the common layers and the group's task layers, lets each selected client run
``E`` local epochs of mini-batch SGD, then folds the returned weight deltas back
in: common deltas are averaged over every selected client, task deltas only
within their group. Personal layers are trained and kept on the client.

Clients return ``delta = broadcast - trained`` and the server applies
``W <- W - aggregate(delta)``. Updates are always combined in ascending client
id, so results do not depend on the order in which clients finish.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np

from . import nn
from .data import Shard
from .errors import (AggregationError, ConfigurationError, DivergedClientError,
                     EvaluationError)
from .nn import DenseLayer, LayerGrad, LossKind
from .partition import (GroupedGradients, LayerGroup, PartitionedModel,
                        assemble_client_model, check_fragment_shapes)

log = logging.getLogger(__name__)


class AggregationRule(str, Enum):
    # sample-weighted mean over the selected clients (FedAvg)
    WEIGHTED_MEAN = "weighted_mean"
    # N_m / (T K N) for common layers and N_m / (K N) for task layers, N global
    GLOBAL_SHARE = "global_share"


@dataclass
class FederationHyperparams:
    rounds: int = 100
    clients_per_group: int = 1
    local_epochs: int = 1
    batch_size: int = 16
    learning_rate: float = 0.1
    aggregation: AggregationRule = AggregationRule.WEIGHTED_MEAN
    seed: int = 0

    def __post_init__(self):
        self.aggregation = AggregationRule(self.aggregation)
        for name in ("rounds", "clients_per_group", "local_epochs", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        # zero is accepted as a null step; negative rates are not
        if not self.learning_rate >= 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")


@dataclass
class ClientState:
    client_id: int
    task_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    personal: list[DenseLayer] = field(default_factory=list)
    epochs_done: int = 0
    # set when output column j of the model predicts task column_tasks[j]
    column_tasks: tuple[int, ...] | None = None

    @property
    def sample_count(self) -> int:
        return len(self.train_x)

    @classmethod
    def from_shard(cls, shard: Shard, personal: Sequence[DenseLayer] = ()) -> "ClientState":
        return cls(shard.client_id, shard.task_id, shard.train_x, shard.train_y,
                   shard.test_x, shard.test_y, [l.copy() for l in personal])


@dataclass
class ServerState:
    """Everything the coordinator holds. Personal layers have no slot here."""

    pretrained: list[DenseLayer]
    common: list[DenseLayer]
    task: dict[int, list[DenseLayer]]
    total_samples: int
    loss: LossKind
    round_index: int = 0

    def task_ids(self) -> list[int]:
        return sorted(self.task)


RoundPlan = dict  # task id -> ascending list of selected client ids


def init_federation(model: PartitionedModel, shards: Sequence[Shard],
                    loss: LossKind | None = None) -> tuple[ServerState, list[ClientState]]:
    """Server and clients starting from ``model``.

    Every task group's task layers and every client's personal layers start
    as copies of the corresponding layers of ``model``.
    """
    if not shards:
        raise ConfigurationError("no client shards")
    ids = [s.client_id for s in shards]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("duplicate client ids")
    loss = LossKind(loss) if loss is not None else nn.default_loss(model.output_activation)
    nn.check_loss_compatible(model.output_activation, loss)
    task_layers = model.group(LayerGroup.TASK)
    personal = model.group(LayerGroup.PERSONAL)
    clients = [ClientState.from_shard(s, personal) for s in shards]
    tasks = sorted({s.task_id for s in shards})
    server = ServerState(
        pretrained=[l.copy() for l in model.group(LayerGroup.PRETRAINED)],
        common=[l.copy() for l in model.group(LayerGroup.COMMON)],
        task={t: [l.copy() for l in task_layers] for t in tasks},
        total_samples=sum(c.sample_count for c in clients),
        loss=loss,
    )
    return server, clients


def group_members(clients: Sequence[ClientState]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for c in clients:
        groups.setdefault(c.task_id, []).append(c.client_id)
    return {t: sorted(ids) for t, ids in sorted(groups.items())}


def sample_clients(rng: np.random.Generator, groups: Mapping[int, Sequence[int]], k: int) -> RoundPlan:
    """Draw ``k`` distinct clients uniformly from each group, groups in ascending task order."""
    plan = {}
    for task in sorted(groups):
        members = sorted(groups[task])
        if k > len(members):
            raise ConfigurationError(
                f"cannot select {k} clients from task group {task} of size {len(members)}"
            )
        chosen = rng.choice(len(members), size=k, replace=False)
        plan[task] = sorted(members[i] for i in chosen)
    return plan


def epoch_order(seed: int, client_id: int, epoch: int, n: int) -> np.ndarray:
    """Row order for a client's ``epoch``-th local epoch (counted over its lifetime)."""
    return np.random.default_rng([seed, client_id, epoch]).permutation(n)


def train_layers(layers: list[DenseLayer], x: np.ndarray, y: np.ndarray, loss: LossKind,
                 *, epochs: int, batch_size: int, eta: float, seed: int, client_id: int,
                 first_epoch: int = 0) -> list[DenseLayer]:
    """Mini-batch SGD on every layer in ``layers``. Raises on a non-finite loss."""
    n = len(x)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for e in range(epochs):
            order = epoch_order(seed, client_id, first_epoch + e, n)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                out, cache = nn.forward(layers, x[idx])
                if not np.isfinite(nn.loss_value(out, y[idx], loss)):
                    raise DivergedClientError(client_id)
                if eta > 0:
                    grads = nn.backward(layers, cache, y[idx], loss)
                    layers = nn.sgd_step(layers, grads, eta)
    if not nn.all_finite(layers):
        raise DivergedClientError(client_id, "non-finite weights after local training")
    return layers


def local_update(client: ClientState, common: Sequence[DenseLayer], task: Sequence[DenseLayer],
                 hp: FederationHyperparams, pretrained: Sequence[DenseLayer] = (),
                 loss: LossKind | None = None) -> GroupedGradients | None:
    """Train a client on the broadcast weights; return its common/task deltas.

    The client's personal layers are replaced by their trained values in
    place. Returns None (with a warning) for a client without training rows.
    """
    model = assemble_client_model(common, task, client.personal, pretrained)
    if client.sample_count == 0:
        log.warning("client %d has an empty shard; skipping", client.client_id)
        return None
    loss = LossKind(loss) if loss is not None else nn.default_loss(model.output_activation)
    n_pre = len(pretrained)
    x = client.train_x
    if n_pre:
        # frozen prefix: its outputs are fixed, so compute them once
        x = nn.predict(model.layers[:n_pre], x)
    broadcast = model.layers[n_pre:]
    trained = train_layers(
        list(broadcast), x, client.train_y, loss,
        epochs=hp.local_epochs, batch_size=hp.batch_size, eta=hp.learning_rate,
        seed=hp.seed, client_id=client.client_id, first_epoch=client.epochs_done,
    )
    client.epochs_done += hp.local_epochs
    tags = model.tags[n_pre:]
    entries: dict[LayerGroup, list[LayerGrad]] = {}
    personal = []
    for tag, before, after in zip(tags, broadcast, trained):
        if tag is LayerGroup.PERSONAL:
            personal.append(after)
        else:
            entries.setdefault(tag, []).append(
                LayerGrad(before.weights - after.weights, before.bias - after.bias))
    client.personal = personal
    return GroupedGradients(entries, client.sample_count, client.client_id, client.task_id)


# -- aggregation -------------------------------------------------------------

def _combine(updates: Sequence[GroupedGradients], group: LayerGroup, coefs, anchored: bool) -> list[LayerGrad]:
    first = updates[0][group]
    if anchored:
        # d_0 + sum_i p_i (d_i - d_0): equals sum_i p_i d_i when sum p_i = 1 and
        # returns a shared delta bit for bit
        out = [LayerGrad(g.weights.copy(), g.bias.copy()) for g in first]
        for u, c in zip(updates[1:], coefs[1:]):
            for acc, g, g0 in zip(out, u[group], first):
                acc.weights += c * (g.weights - g0.weights)
                acc.bias += c * (g.bias - g0.bias)
        return out
    out = [LayerGrad(coefs[0] * g.weights, coefs[0] * g.bias) for g in first]
    for u, c in zip(updates[1:], coefs[1:]):
        for acc, g in zip(out, u[group]):
            acc.weights += c * g.weights
            acc.bias += c * g.bias
    return out


def _check_updates(updates, group):
    if not updates:
        raise AggregationError(f"no updates to aggregate for {group.name.lower()} layers")
    shapes = [tuple(g.weights.shape for g in u[group]) for u in updates]
    if len(set(shapes)) != 1:
        raise AggregationError(f"incongruent {group.name.lower()} update shapes: {set(shapes)}")
    return sorted(updates, key=lambda u: u.client_id)


def _aggregate(updates, group, rule, denominator):
    updates = _check_updates(updates, group)
    rule = AggregationRule(rule)
    if rule is AggregationRule.WEIGHTED_MEAN:
        total = sum(u.sample_count for u in updates)
        if total <= 0:
            raise AggregationError("selected clients hold no samples")
        return _combine(updates, group, [u.sample_count / total for u in updates], anchored=True)
    return _combine(updates, group, [u.sample_count / denominator for u in updates], anchored=False)


def aggregate_common(updates: Sequence[GroupedGradients], rule: AggregationRule,
                     n_tasks: int, k: int, total_samples: int) -> list[LayerGrad]:
    """Combine common-layer deltas of every selected client across all task groups."""
    return _aggregate(updates, LayerGroup.COMMON, rule, n_tasks * k * total_samples)


def aggregate_task(updates: Sequence[GroupedGradients], rule: AggregationRule,
                   k: int, total_samples: int) -> list[LayerGrad]:
    """Combine task-layer deltas of the selected clients of one task group."""
    tasks = {u.task_id for u in updates}
    if len(tasks) > 1:
        raise AggregationError(f"task aggregation mixes task groups {sorted(tasks)}")
    return _aggregate(updates, LayerGroup.TASK, rule, k * total_samples)


def apply_delta(layers: Sequence[DenseLayer], delta: Sequence[LayerGrad]) -> list[DenseLayer]:
    return [DenseLayer(l.weights - d.weights, l.bias - d.bias, l.activation)
            for l, d in zip(layers, delta)]


# -- evaluation ----------------------------------------------------------------

def _score(output: np.ndarray, targets: np.ndarray, loss: LossKind) -> tuple[int, int, float]:
    """(correct, count, summed loss) for one prediction block."""
    n = output.shape[0]
    if output.shape[1] > 1 and loss is not LossKind.BINARY_CROSS_ENTROPY:
        correct = int(np.sum(np.argmax(output, axis=1) == np.argmax(targets, axis=1)))
        count = n
    else:
        # ties at exactly 0.5 predict the positive class
        correct = int(np.sum((output >= 0.5) == (targets >= 0.5)))
        count = output.size
    return correct, count, nn.loss_value(output, targets, loss) * n


def evaluate(model, x: np.ndarray, y: np.ndarray, output_index: int | None = None,
             loss: LossKind | None = None) -> tuple[float, float]:
    """Accuracy and mean loss of ``model`` (PartitionedModel or layer list) on a test split.

    Multiclass outputs are scored by argmax, binary ones by thresholding at
    0.5. ``output_index`` restricts scoring to one sigmoid output column.
    """
    layers = model.layers if isinstance(model, PartitionedModel) else list(model)
    if len(x) == 0:
        raise EvaluationError("empty test set")
    loss = LossKind(loss) if loss is not None else nn.default_loss(layers[-1].activation)
    out = nn.predict(layers, x)
    y = np.asarray(y, dtype=np.float64)
    if output_index is not None:
        out, y = out[:, [output_index]], y[:, [output_index]]
    correct, count, loss_sum = _score(out, y, loss)
    return correct / count, loss_sum / len(x)


@dataclass
class TaskStats:
    correct: int = 0
    count: int = 0
    loss_sum: float = 0.0
    rows: int = 0

    def add(self, correct, count, loss_sum, rows):
        self.correct += correct
        self.count += count
        self.loss_sum += loss_sum
        self.rows += rows

    @property
    def accuracy(self) -> float:
        return self.correct / self.count if self.count else float("nan")

    @property
    def loss(self) -> float:
        return self.loss_sum / self.rows if self.rows else float("nan")


@dataclass
class RoundRecord:
    round: int
    tasks: dict[int, TaskStats]

    @property
    def accuracy(self) -> float:
        """Pooled accuracy over every evaluated test row."""
        correct = sum(s.correct for s in self.tasks.values())
        count = sum(s.count for s in self.tasks.values())
        return correct / count if count else float("nan")

    @property
    def loss(self) -> float:
        rows = sum(s.rows for s in self.tasks.values())
        return sum(s.loss_sum for s in self.tasks.values()) / rows if rows else float("nan")

    @property
    def mean_task_accuracy(self) -> float:
        return float(np.mean([s.accuracy for s in self.tasks.values()]))


@dataclass
class MetricsLog:
    records: list[RoundRecord] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    task_names: dict[int, str] = field(default_factory=dict)
    label: str = ""
    status: str = "ok"

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final(self) -> RoundRecord:
        return self.records[-1]

    @property
    def final_accuracy(self) -> float:
        if self.status != "ok" or not self.records:
            return float("nan")
        return self.final.accuracy

    @property
    def total_seconds(self) -> float:
        return float(sum(self.wall_clock))

    @classmethod
    def merge(cls, logs: Sequence["MetricsLog"], label: str = "") -> "MetricsLog":
        """Combine logs of parallel federations round by round (task stats are summed)."""
        if not logs:
            raise ValueError("nothing to merge")
        rounds = {len(l) for l in logs}
        if len(rounds) != 1:
            raise ValueError(f"logs have different lengths {sorted(rounds)}")
        merged = cls(label=label)
        for l in logs:
            merged.task_names.update(l.task_names)
        for r in range(rounds.pop()):
            tasks: dict[int, TaskStats] = {}
            for l in logs:
                for t, s in l.records[r].tasks.items():
                    tasks.setdefault(t, TaskStats()).add(s.correct, s.count, s.loss_sum, s.rows)
            merged.records.append(RoundRecord(logs[0].records[r].round, dict(sorted(tasks.items()))))
        merged.wall_clock = [sum(l.wall_clock[r] for l in logs) for r in range(len(merged.records))]
        return merged


def client_model(server: ServerState, client: ClientState) -> PartitionedModel:
    return assemble_client_model(server.common, server.task.get(client.task_id, []),
                                 client.personal, server.pretrained)


def evaluate_clients(server: ServerState, clients: Sequence[ClientState], round_index: int) -> RoundRecord:
    tasks: dict[int, TaskStats] = {}
    for c in sorted(clients, key=lambda c: c.client_id):
        if len(c.test_x) == 0:
            continue
        out = nn.predict(client_model(server, c).layers, c.test_x)
        rows = len(c.test_x)
        if c.column_tasks is None:
            tasks.setdefault(c.task_id, TaskStats()).add(*_score(out, c.test_y, server.loss), rows)
        else:
            for j, t in enumerate(c.column_tasks):
                stats = _score(out[:, [j]], c.test_y[:, [j]], server.loss)
                tasks.setdefault(t, TaskStats()).add(*stats, rows)
    return RoundRecord(round_index, dict(sorted(tasks.items())))


# -- rounds --------------------------------------------------------------------

def run_round(server: ServerState, clients: Sequence[ClientState], hp: FederationHyperparams,
              rng: np.random.Generator) -> tuple[ServerState, RoundRecord]:
    """One sample / broadcast / local-train / aggregate pass; mutates and returns ``server``."""
    by_id = {c.client_id: c for c in clients}
    plan = sample_clients(rng, group_members(clients), hp.clients_per_group)
    n_tasks = len(plan)
    common = server.common
    all_updates = []
    for task, selected in plan.items():
        task_layers = server.task[task]
        updates = []
        for cid in selected:
            u = local_update(by_id[cid], common, task_layers, hp, server.pretrained, server.loss)
            if u is not None:
                updates.append(u)
        if task_layers and updates:
            delta = aggregate_task(updates, hp.aggregation, hp.clients_per_group, server.total_samples)
            server.task[task] = apply_delta(task_layers, delta)
        all_updates.extend(updates)
    if common and all_updates:
        delta = aggregate_common(all_updates, hp.aggregation, n_tasks,
                                 hp.clients_per_group, server.total_samples)
        server.common = apply_delta(common, delta)
    server.round_index += 1
    return server, evaluate_clients(server, clients, server.round_index)


def run_training(server: ServerState, clients: Sequence[ClientState], hp: FederationHyperparams,
                 rng: np.random.Generator | None = None,
                 on_round: Callable[[RoundRecord], None] | None = None,
                 task_names: Mapping[int, str] | None = None) -> MetricsLog:
    """Run ``hp.rounds`` rounds, evaluating every client's test split after each."""
    if hp.rounds < 1:
        raise ConfigurationError("rounds must be >= 1")
    for c in clients:
        check_fragment_shapes(c.personal, clients[0].personal, f"client {c.client_id} personal")
    if rng is None:
        rng = np.random.default_rng(hp.seed)
    metrics = MetricsLog(task_names=dict(task_names or {}))
    for _ in range(hp.rounds):
        t0 = time.perf_counter()
        server, record = run_round(server, clients, hp, rng)
        metrics.wall_clock.append(time.perf_counter() - t0)
        metrics.records.append(record)
        if on_round is not None:
            on_round(record)
        log.debug("round %d: accuracy %.4f", record.round, record.accuracy)
    return metrics
