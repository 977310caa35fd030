import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import reference
from layerfed import nn
from layerfed.data import Shard
from layerfed.errors import ConfigurationError, DivergedClientError, EvaluationError
from layerfed.federation import (ClientState, FederationHyperparams, ServerState, evaluate,
                                 init_federation, local_update, run_round, run_training,
                                 sample_clients)
from layerfed.partition import LayerGroup, build_partitioned_model

C, T, P, R = LayerGroup.COMMON, LayerGroup.TASK, LayerGroup.PERSONAL, LayerGroup.PRETRAINED


def make_shards(n_clients, n_tasks, rows=24, d=5, seed=0, test_rows=8):
    rng = np.random.default_rng(seed)
    per_group = n_clients // n_tasks
    w = rng.normal(size=(n_tasks, d))
    shards = []
    for cid in range(n_clients):
        task = cid // per_group
        x = rng.normal(size=(rows + test_rows, d))
        y = (x @ w[task] > 0).astype(float)[:, None]
        idx = np.arange(rows + test_rows)
        shards.append(Shard(cid, task, f"task{task}", x[:rows], y[:rows], x[rows:], y[rows:],
                            idx[:rows], idx[rows:]))
    return shards


def small_model(tags, d=5, seed=1):
    specs = nn.layer_specs(d, [6, 4, 1][-len(tags):] if len(tags) <= 3 else [6] * (len(tags) - 1) + [1],
                           ["relu"] * (len(tags) - 1) + ["sigmoid"])
    return build_partitioned_model(specs, tags, seed)


def snapshot(server: ServerState):
    layers = server.pretrained + server.common + [l for t in server.task_ids() for l in server.task[t]]
    return [(l.weights.copy(), l.bias.copy()) for l in layers]


def same_snapshot(a, b):
    return len(a) == len(b) and all(np.array_equal(x[0], y[0]) and np.array_equal(x[1], y[1])
                                    for x, y in zip(a, b))


# -- sampling -----------------------------------------------------------------

def test_sample_whole_group_in_canonical_order():
    plan = sample_clients(np.random.default_rng(0), {0: [9, 3, 5], 1: [4, 1, 2]}, 3)
    assert plan == {0: [3, 5, 9], 1: [1, 2, 4]}


def test_sample_singleton():
    assert sample_clients(np.random.default_rng(0), {2: [7]}, 1) == {2: [7]}


def test_sample_rejects_oversized_k():
    with pytest.raises(ConfigurationError):
        sample_clients(np.random.default_rng(0), {0: [1, 2]}, 3)


def test_sample_pairs_are_uniform():
    rng = np.random.default_rng(2024)
    draws = 10_000
    counts = {}
    for _ in range(draws):
        pair = tuple(sample_clients(rng, {0: [0, 1, 2, 3]}, 2)[0])
        assert len(set(pair)) == 2
        counts[pair] = counts.get(pair, 0) + 1
    assert len(counts) == 6
    p = 1 / 6
    expected, sigma = draws * p, np.sqrt(draws * p * (1 - p))
    assert all(abs(c - expected) <= 3 * sigma for c in counts.values())
    chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
    assert chi2 < 20.52  # 0.999 quantile of chi-square with 5 dof


def test_sampling_is_deterministic_given_rng_state():
    groups = {0: list(range(10)), 1: list(range(10, 20))}
    a = sample_clients(np.random.default_rng(5), groups, 4)
    b = sample_clients(np.random.default_rng(5), groups, 4)
    assert a == b


# -- local updates --------------------------------------------------------------

def _setup(tags, n_clients=2, n_tasks=1, **kw):
    model = small_model(tags)
    server, clients = init_federation(model, make_shards(n_clients, n_tasks, **kw))
    return model, server, clients


def test_zero_learning_rate_is_null_step():
    _, server, clients = _setup([C, T, P])
    c = clients[0]
    personal_before = [l.copy() for l in c.personal]
    hp = FederationHyperparams(learning_rate=0.0, batch_size=4, local_epochs=2)
    u = local_update(c, server.common, server.task[0], hp)
    for g in u[C] + u[T]:
        assert not g.weights.any() and not g.bias.any()
    assert all(a.same_as(b) for a, b in zip(c.personal, personal_before))


def test_single_full_batch_delta_is_eta_times_gradient():
    model, server, clients = _setup([C, T, P])
    c = clients[0]
    eta = 0.05
    grads = nn.gradients(model.layers, c.train_x, c.train_y, nn.LossKind.BINARY_CROSS_ENTROPY)
    hp = FederationHyperparams(learning_rate=eta, batch_size=c.sample_count, local_epochs=1)
    u = local_update(c, server.common, server.task[0], hp)
    for got, g in zip(u[C] + u[T], grads[:2]):
        np.testing.assert_allclose(got.weights, eta * g.weights, rtol=0, atol=1e-12)
        np.testing.assert_allclose(got.bias, eta * g.bias, rtol=0, atol=1e-12)
    # the personal layer took the same step locally
    np.testing.assert_allclose(c.personal[0].weights, model.layers[2].weights - eta * grads[2].weights,
                               rtol=0, atol=1e-12)
    assert P not in u.entries


def test_identical_clients_return_identical_updates():
    _, server, clients = _setup([C, C, T])
    a = ClientState(**{**clients[0].__dict__, "personal": []})
    b = ClientState(**{**clients[0].__dict__, "personal": []})
    hp = FederationHyperparams(learning_rate=0.1, batch_size=5, local_epochs=2)
    ua = local_update(a, server.common, server.task[0], hp)
    ub = local_update(b, server.common, server.task[0], hp)
    for x, y in zip(ua[C] + ua[T], ub[C] + ub[T]):
        assert np.array_equal(x.weights, y.weights) and np.array_equal(x.bias, y.bias)
    # different ids reshuffle rows, which only changes summation order of a full batch
    other = ClientState(**{**clients[0].__dict__, "client_id": 77, "personal": []})
    full = FederationHyperparams(learning_rate=0.1, batch_size=other.sample_count)
    u1 = local_update(ClientState(**{**clients[0].__dict__, "personal": []}), server.common, server.task[0], full)
    u2 = local_update(other, server.common, server.task[0], full)
    for x, y in zip(u1[C], u2[C]):
        np.testing.assert_allclose(x.weights, y.weights, rtol=0, atol=1e-12)


def test_empty_shard_is_skipped_with_warning(caplog):
    _, server, clients = _setup([C, T])
    c = clients[0]
    c.train_x, c.train_y = c.train_x[:0], c.train_y[:0]
    with caplog.at_level(logging.WARNING):
        assert local_update(c, server.common, server.task[0], FederationHyperparams()) is None
    assert "empty shard" in caplog.text


def test_divergence_raises_with_client_id():
    model = build_partitioned_model(nn.layer_specs(5, [1], ["identity"]), [C], 0)
    shards = make_shards(2, 1)
    for s in shards:
        s.train_x = s.train_x * 1e3
    server, clients = init_federation(model, shards)
    hp = FederationHyperparams(learning_rate=1e6, batch_size=4, local_epochs=5)
    with pytest.raises(DivergedClientError) as info:
        local_update(clients[1], server.common, [], hp)
    assert info.value.client_id == 1


# -- rounds ---------------------------------------------------------------------

def test_all_personal_round_leaves_server_unchanged():
    _, server, clients = _setup([P, P, P], n_clients=4, n_tasks=2)
    before = snapshot(server)
    hp = FederationHyperparams(clients_per_group=2, batch_size=8)
    run_round(server, clients, hp, np.random.default_rng(0))
    assert same_snapshot(before, snapshot(server))
    assert server.round_index == 1


def test_run_round_is_deterministic():
    def go():
        _, server, clients = _setup([C, T, P], n_clients=6, n_tasks=2)
        hp = FederationHyperparams(clients_per_group=2, batch_size=5, local_epochs=2, seed=3)
        rng = np.random.default_rng(3)
        for _ in range(3):
            run_round(server, clients, hp, rng)
        return snapshot(server), [l.weights.copy() for c in clients for l in c.personal]
    (s1, p1), (s2, p2) = go(), go()
    assert same_snapshot(s1, s2)
    assert all(np.array_equal(a, b) for a, b in zip(p1, p2))


def test_single_task_all_common_round_is_fedavg():
    model, server, clients = _setup([C, C, C], n_clients=5, n_tasks=1)
    hp = FederationHyperparams(clients_per_group=3, batch_size=7, local_epochs=2, learning_rate=0.2, seed=4)
    params = [(l.weights, l.bias, l.activation) for l in model.layers]
    data = {c.client_id: (c.train_x, c.train_y) for c in clients}
    run_round(server, clients, hp, np.random.default_rng(4))
    expected = reference.fedavg(params, data, rounds=1, k=3, epochs=2, batch=7, eta=0.2, seed=4)
    for layer, (w, b, _) in zip(server.common, expected):
        assert np.array_equal(layer.weights, w) and np.array_equal(layer.bias, b)
    # and agrees with averaging client weights directly, up to rounding
    picked = sample_clients(np.random.default_rng(4), {0: list(data)}, 3)[0]
    textbook = reference.textbook_fedavg_round(params, data, picked, epochs=2, batch=7, eta=0.2, seed=4)
    for layer, (w, b, _) in zip(server.common, textbook):
        np.testing.assert_allclose(layer.weights, w, rtol=0, atol=1e-12)


def test_task_layers_stay_within_group():
    _, server, clients = _setup([C, T], n_clients=4, n_tasks=2)
    hp = FederationHyperparams(clients_per_group=2, batch_size=6, learning_rate=0.3)
    run_round(server, clients, hp, np.random.default_rng(0))
    assert not server.task[0][0].same_as(server.task[1][0])


def test_run_training_length_and_rejects_zero_rounds():
    _, server, clients = _setup([C, T], n_clients=4, n_tasks=2)
    hp = FederationHyperparams(rounds=3, clients_per_group=1, batch_size=6)
    log = run_training(server, clients, hp)
    assert len(log) == 3
    assert [r.round for r in log.records] == [1, 2, 3]
    with pytest.raises(ConfigurationError):
        FederationHyperparams(rounds=0)


def test_run_training_learns_separable_data():
    # labels are a fixed linear threshold of the features with a margin, so a
    # linear sigmoid unit can reach 100% accuracy
    rng = np.random.default_rng(0)
    w = np.array([1.0, -2.0, 0.5, 0.0, 1.5])
    shards = []
    for cid in range(4):
        x = rng.normal(size=(200, 5))
        x = x[np.abs(x @ w) > 0.5][:120]
        y = (x @ w > 0).astype(float)[:, None]
        idx = np.arange(len(x))
        shards.append(Shard(cid, 0, "t", x[:90], y[:90], x[90:], y[90:], idx[:90], idx[90:]))
    model = build_partitioned_model(nn.layer_specs(5, [1], ["sigmoid"]), [C], 0)
    server, clients = init_federation(model, shards)
    hp = FederationHyperparams(rounds=30, clients_per_group=4, batch_size=10, learning_rate=0.5)
    log = run_training(server, clients, hp)
    assert log.final_accuracy >= 0.99


# -- evaluation -------------------------------------------------------------------

def test_evaluate_perfect_predictions():
    layer = nn.DenseLayer(np.array([[50.0]]), np.array([0.0]), "sigmoid")
    x = np.array([[1.0], [-1.0], [2.0]])
    y = np.array([[1.0], [0.0], [1.0]])
    acc, loss = evaluate([layer], x, y)
    assert acc == 1.0 and loss >= 0


def test_evaluate_tie_predicts_positive():
    layer = nn.DenseLayer(np.zeros((1, 1)), np.zeros(1), "sigmoid")
    x = np.ones((2, 1))
    assert evaluate([layer], x, np.ones((2, 1)))[0] == 1.0
    assert evaluate([layer], x, np.zeros((2, 1)))[0] == 0.0


def test_evaluate_random_labels_give_majority_rate():
    rng = np.random.default_rng(3)
    y = (rng.random((20_000, 1)) < 0.7).astype(float)
    # a constant positive predictor is right exactly on the majority class
    layer = nn.DenseLayer(np.zeros((1, 2)), np.array([3.0]), "sigmoid")
    acc, _ = evaluate([layer], rng.normal(size=(20_000, 2)), y)
    assert acc == pytest.approx(y.mean(), abs=1e-12)


def test_evaluate_multiclass_by_argmax():
    layer = nn.DenseLayer(np.eye(3), np.zeros(3), "softmax")
    x = np.array([[5.0, 0, 0], [0, 5.0, 0], [0, 0, 5.0], [5.0, 0, 0]])
    y = np.eye(3)[[0, 1, 2, 1]]
    assert evaluate([layer], x, y)[0] == 0.75


def test_evaluate_empty_rejected():
    layer = nn.DenseLayer(np.zeros((1, 1)), np.zeros(1), "sigmoid")
    with pytest.raises(EvaluationError):
        evaluate([layer], np.zeros((0, 1)), np.zeros((0, 1)))


# -- structural invariants ------------------------------------------------------

def test_server_state_has_no_personal_parameters():
    _, server, clients = _setup([C, T, P, P], n_clients=4, n_tasks=2)
    hp = FederationHyperparams(clients_per_group=2, batch_size=8)
    rng = np.random.default_rng(0)
    for _ in range(2):
        run_round(server, clients, hp, rng)
        personal_ids = {id(a) for c in clients for l in c.personal for a in (l.weights, l.bias)}
        server_layers = server.pretrained + server.common + [l for t in server.task.values() for l in t]
        assert not personal_ids & {id(a) for l in server_layers for a in (l.weights, l.bias)}
        # one common layer plus one task layer per group, never the personal pair
        assert len(server_layers) == 1 + 2
        assert not hasattr(server, "personal")


def test_pretrained_weights_constant_across_rounds_and_clients():
    model = build_partitioned_model(nn.layer_specs(5, [6, 4, 1], ["relu", "relu", "sigmoid"]), [R, C, T], 2)
    server, clients = init_federation(model, make_shards(4, 2))
    frozen = model.layers[0].copy()
    hp = FederationHyperparams(clients_per_group=2, batch_size=6, learning_rate=0.3)
    rng = np.random.default_rng(0)
    from layerfed.federation import client_model
    for _ in range(3):
        run_round(server, clients, hp, rng)
        assert server.pretrained[0].same_as(frozen)
        for c in clients:
            assert client_model(server, c).layers[0].same_as(frozen)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_all_personal_training_equals_isolated_sgd(seed):
    model, server, clients = _setup([P, P, P], n_clients=4, n_tasks=2, seed=seed)
    hp = FederationHyperparams(rounds=3, clients_per_group=2, batch_size=7, local_epochs=2,
                               learning_rate=0.3, seed=seed)
    run_training(server, clients, hp)
    params = [(l.weights, l.bias, l.activation) for l in model.layers]
    for c in clients:
        expected = reference.sgd_train(params, c.train_x, c.train_y, epochs=6, batch=7, eta=0.3,
                                       seed=seed, cid=c.client_id)
        for layer, (w, b, _) in zip(c.personal, expected):
            assert np.array_equal(layer.weights, w) and np.array_equal(layer.bias, b)
