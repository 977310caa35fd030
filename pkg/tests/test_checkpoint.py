import numpy as np
import pytest

from layerfed import nn
from layerfed.checkpoint import load_checkpoint, save_checkpoint
from layerfed.data import SyntheticConfig, gen_synthetic_multitask, partition_uniform
from layerfed.errors import IngestionError
from layerfed.federation import FederationHyperparams, init_federation, run_round
from layerfed.partition import LayerGroup, build_partitioned_model


def _federation():
    ds = gen_synthetic_multitask(SyntheticConfig(n_samples=600, n_tasks=2, seed=0))
    shards = partition_uniform(ds, 6, 2, seed=0)
    specs = nn.layer_specs(ds.d, [8, 6, 1], ["relu", "relu", "sigmoid"])
    tags = [LayerGroup.COMMON, LayerGroup.TASK, LayerGroup.PERSONAL]
    return init_federation(build_partitioned_model(specs, tags, 0), shards)


def _state(server, clients):
    layers = server.common + [l for t in sorted(server.task) for l in server.task[t]]
    layers += [l for c in clients for l in c.personal]
    return [a for l in layers for a in (l.weights, l.bias)] + [c.epochs_done for c in clients]


def test_resume_is_bitwise_identical(tmp_path):
    hp = FederationHyperparams(clients_per_group=2, batch_size=8, local_epochs=2, seed=1)

    server, clients = _federation()
    rng = np.random.default_rng(1)
    for _ in range(4):
        run_round(server, clients, hp, rng)
    straight = _state(server, clients)

    server, clients = _federation()
    rng = np.random.default_rng(1)
    for _ in range(2):
        run_round(server, clients, hp, rng)
    save_checkpoint(tmp_path / "ck.npz", server, clients, rng)
    _, fresh = _federation()
    server, rng = load_checkpoint(tmp_path / "ck.npz", fresh)
    assert server.round_index == 2
    for _ in range(2):
        run_round(server, fresh, hp, rng)
    resumed = _state(server, fresh)

    assert len(straight) == len(resumed)
    assert all(np.array_equal(a, b) for a, b in zip(straight, resumed))


def test_checkpoint_must_cover_every_client(tmp_path):
    server, clients = _federation()
    save_checkpoint(tmp_path / "ck.npz", server, clients[:3], np.random.default_rng(0))
    with pytest.raises(IngestionError):
        load_checkpoint(tmp_path / "ck.npz", clients)
