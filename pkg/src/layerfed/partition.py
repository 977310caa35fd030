"""Layer-group tagging of dense networks.

A network is split, input to output, into four groups: a frozen pretrained
prefix, layers shared by every client, layers shared within a task group, and
layers private to one client.  Any group may be empty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from . import nn
from .errors import AssemblyError, PartitionError, ShapeError
from .nn import DenseLayer, LayerGrad


class LayerGroup(IntEnum):
    PRETRAINED = 0
    COMMON = 1
    TASK = 2
    PERSONAL = 3

    @classmethod
    def parse(cls, value) -> "LayerGroup":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        try:
            return _ALIASES[key]
        except KeyError:
            raise PartitionError(f"unknown layer group {value!r}") from None


_ALIASES = {
    "pretrained": LayerGroup.PRETRAINED,
    "pre": LayerGroup.PRETRAINED,
    "common": LayerGroup.COMMON,
    "com": LayerGroup.COMMON,
    "task": LayerGroup.TASK,
    "task_specific": LayerGroup.TASK,
    "taskspecific": LayerGroup.TASK,
    "personal": LayerGroup.PERSONAL,
    "pers": LayerGroup.PERSONAL,
}

GROUP_ORDER = tuple(LayerGroup)


def check_tag_order(tags: Sequence[LayerGroup]) -> None:
    for i in range(1, len(tags)):
        if tags[i] < tags[i - 1]:
            raise PartitionError(
                f"layer {i} tagged {tags[i].name} follows {tags[i - 1].name}; "
                "groups must run pretrained -> common -> task -> personal"
            )


def tags_from_counts(pretrained=0, common=0, task=0, personal=0) -> list[LayerGroup]:
    counts = (pretrained, common, task, personal)
    if any(c < 0 for c in counts):
        raise PartitionError(f"negative layer count in {counts}")
    tags: list[LayerGroup] = []
    for group, count in zip(GROUP_ORDER, counts):
        tags.extend([group] * count)
    return tags


@dataclass
class PartitionedModel:
    layers: list[DenseLayer]
    tags: list[LayerGroup]
    frozen: list[bool] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.tags = [LayerGroup.parse(t) for t in self.tags]
        if len(self.tags) != len(self.layers):
            raise PartitionError(f"{len(self.tags)} tags for {len(self.layers)} layers")
        check_tag_order(self.tags)
        if self.frozen is None:
            self.frozen = [t is LayerGroup.PRETRAINED for t in self.tags]
        for i, (tag, frz) in enumerate(zip(self.tags, self.frozen)):
            if tag is LayerGroup.PRETRAINED and not frz:
                raise PartitionError(f"layer {i} is pretrained but not frozen")
        nn.validate_network(self.layers)

    @property
    def trainable(self) -> list[bool]:
        return [not f for f in self.frozen]

    def indices(self, group: LayerGroup) -> list[int]:
        return [i for i, t in enumerate(self.tags) if t is group]

    def group(self, group: LayerGroup) -> list[DenseLayer]:
        return [self.layers[i] for i in self.indices(group)]

    def counts(self) -> dict[LayerGroup, int]:
        return {g: len(self.indices(g)) for g in GROUP_ORDER}

    def copy(self) -> "PartitionedModel":
        return PartitionedModel([l.copy() for l in self.layers], list(self.tags), list(self.frozen))

    @property
    def output_activation(self) -> str:
        return self.layers[-1].activation


@dataclass
class GroupedGradients:
    """Per-group update entries submitted by one client for one round."""

    entries: dict[LayerGroup, list[LayerGrad]]
    sample_count: int
    client_id: int = -1
    task_id: int = -1

    def __getitem__(self, group: LayerGroup) -> list[LayerGrad]:
        return self.entries.get(group, [])


def build_partitioned_model(specs: Sequence[nn.LayerSpec], tags, seed: int,
                            pretrained_layers: Sequence[DenseLayer] | None = None) -> PartitionedModel:
    """Initialise a network from ``specs`` and apply ``tags``.

    ``pretrained_layers`` replaces the randomly initialised frozen prefix when
    weights from an existing model are available.
    """
    tags = [LayerGroup.parse(t) for t in tags]
    if len(tags) != len(specs):
        raise PartitionError(f"{len(tags)} tags for {len(specs)} layers")
    check_tag_order(tags)
    layers = nn.init_weights(specs, seed)
    if pretrained_layers:
        n_pre = tags.count(LayerGroup.PRETRAINED)
        if len(pretrained_layers) != n_pre:
            raise PartitionError(
                f"{len(pretrained_layers)} pretrained layers supplied for {n_pre} pretrained slots"
            )
        for i, layer in enumerate(pretrained_layers):
            if layer.weights.shape != layers[i].weights.shape:
                raise ShapeError(
                    f"pretrained layer {i} has shape {layer.weights.shape}, "
                    f"architecture expects {layers[i].weights.shape}"
                )
            layers[i] = layer.copy()
    return PartitionedModel(layers, tags)


def compose_forward(model: PartitionedModel, batch: np.ndarray) -> np.ndarray:
    """Evaluate h_pers(h_task(h_com(h_pre(x)))) group by group."""
    out = np.asarray(batch, dtype=np.float64)
    for group in GROUP_ORDER:
        layers = model.group(group)
        if layers:
            out, _ = nn.forward(layers, out)
    return out


def split_gradients(model: PartitionedModel, grads: Sequence[LayerGrad],
                    sample_count: int = 0, client_id: int = -1, task_id: int = -1) -> GroupedGradients:
    if len(grads) != len(model.layers):
        raise ShapeError(f"{len(grads)} gradient entries for {len(model.layers)} layers")
    entries: dict[LayerGroup, list[LayerGrad]] = {}
    for tag, frz, g in zip(model.tags, model.frozen, grads):
        if frz:
            continue
        entries.setdefault(tag, []).append(g)
    return GroupedGradients(entries, sample_count, client_id, task_id)


def split_weights(model: PartitionedModel) -> dict[LayerGroup, list[DenseLayer]]:
    """Copies of each group's layers, keyed by group (empty groups included)."""
    return {g: [l.copy() for l in model.group(g)] for g in GROUP_ORDER}


def assemble_client_model(common: Sequence[DenseLayer], task: Sequence[DenseLayer],
                          personal: Sequence[DenseLayer],
                          pretrained: Sequence[DenseLayer] = ()) -> PartitionedModel:
    """Stack private copies of the four fragments into one client model."""
    layers: list[DenseLayer] = []
    tags: list[LayerGroup] = []
    for group, frag in zip(GROUP_ORDER, (pretrained, common, task, personal)):
        for layer in frag:
            layers.append(layer.copy())
            tags.append(group)
    if not layers:
        raise AssemblyError("all fragments are empty")
    for i in range(1, len(layers)):
        if layers[i].in_features != layers[i - 1].out_features:
            raise AssemblyError(
                f"fragment mismatch at layer {i} ({tags[i].name}): expects "
                f"{layers[i].in_features} inputs, previous layer gives {layers[i - 1].out_features}"
            )
    try:
        return PartitionedModel(layers, tags)
    except ShapeError as exc:  # pragma: no cover - dims were checked above
        raise AssemblyError(str(exc)) from exc


def check_fragment_shapes(frag: Sequence[DenseLayer], template: Sequence[DenseLayer], what: str) -> None:
    if len(frag) != len(template):
        raise AssemblyError(f"{what}: {len(frag)} layers, expected {len(template)}")
    for i, (a, b) in enumerate(zip(frag, template)):
        if a.weights.shape != b.weights.shape or a.activation != b.activation:
            raise AssemblyError(
                f"{what} layer {i}: {a.weights.shape}/{a.activation} "
                f"vs expected {b.weights.shape}/{b.activation}"
            )
