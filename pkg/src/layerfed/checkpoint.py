"""Versioned ``.npz`` checkpoints of a federation: server, personal layers, RNG."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import IngestionError
from .federation import ClientState, ServerState
from .nn import DenseLayer, LossKind

FORMAT_VERSION = 1


def _pack(prefix: str, layers: Sequence[DenseLayer], arrays: dict) -> list[str]:
    for i, layer in enumerate(layers):
        arrays[f"{prefix}/{i}/w"] = layer.weights
        arrays[f"{prefix}/{i}/b"] = layer.bias
    return [l.activation for l in layers]


def _unpack(prefix: str, activations: Sequence[str], data) -> list[DenseLayer]:
    return [DenseLayer(data[f"{prefix}/{i}/w"].copy(), data[f"{prefix}/{i}/b"].copy(), act)
            for i, act in enumerate(activations)]


def save_checkpoint(path, server: ServerState, clients: Sequence[ClientState],
                    rng: np.random.Generator) -> Path:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    meta = {
        "version": FORMAT_VERSION,
        "round_index": server.round_index,
        "total_samples": server.total_samples,
        "loss": server.loss.value,
        "rng_state": rng.bit_generator.state,
        "pretrained": _pack("pretrained", server.pretrained, arrays),
        "common": _pack("common", server.common, arrays),
        "task": {str(t): _pack(f"task/{t}", layers, arrays) for t, layers in server.task.items()},
        "clients": {
            str(c.client_id): {
                "epochs_done": c.epochs_done,
                "personal": _pack(f"personal/{c.client_id}", c.personal, arrays),
            }
            for c in clients
        },
    }
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path, clients: Sequence[ClientState]) -> tuple[ServerState, np.random.Generator]:
    """Restore server state and RNG; write personal layers back into ``clients``."""
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != FORMAT_VERSION:
            raise IngestionError(f"unsupported checkpoint version {meta.get('version')!r}")
        server = ServerState(
            pretrained=_unpack("pretrained", meta["pretrained"], data),
            common=_unpack("common", meta["common"], data),
            task={int(t): _unpack(f"task/{t}", acts, data) for t, acts in meta["task"].items()},
            total_samples=meta["total_samples"],
            loss=LossKind(meta["loss"]),
            round_index=meta["round_index"],
        )
        saved = meta["clients"]
        for c in clients:
            entry = saved.get(str(c.client_id))
            if entry is None:
                raise IngestionError(f"checkpoint has no state for client {c.client_id}")
            c.personal = _unpack(f"personal/{c.client_id}", entry["personal"], data)
            c.epochs_done = entry["epochs_done"]
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return server, rng
