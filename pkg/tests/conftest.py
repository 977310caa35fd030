import numpy as np
import pytest

from layerfed import nn

_ACCEPTANCE = {}


def random_network(rng, max_layers=4, max_width=16, max_batch=8, output=None):
    """Random dense net plus a matching batch/targets/loss, with ReLU kinks avoided."""
    while True:
        n_layers = int(rng.integers(1, max_layers + 1))
        widths = [int(w) for w in rng.integers(1, max_width + 1, size=n_layers + 1)]
        kind = output or rng.choice(["bce", "cce", "mse"])
        hidden = [str(rng.choice(["relu", "sigmoid", "identity"])) for _ in range(n_layers - 1)]
        if kind == "bce":
            out_act = "sigmoid"
        elif kind == "cce":
            out_act = "softmax"
            widths[-1] = max(widths[-1], 2)
        else:
            out_act = str(rng.choice(["identity", "sigmoid", "relu", "softmax"]))
        specs = nn.layer_specs(widths[0], widths[1:], hidden + [out_act])
        layers = nn.init_weights(specs, int(rng.integers(2**31)))
        for l in layers:
            l.bias[:] = rng.normal(scale=0.1, size=l.bias.shape)
        n = int(rng.integers(1, max_batch + 1))
        x = rng.normal(size=(n, widths[0]))
        _, cache = nn.forward(layers, x)
        # finite differences are meaningless across a ReLU kink
        if any(l.activation == "relu" and np.min(np.abs(z)) < 1e-3
               for l, (_, z, _) in zip(layers, cache)):
            continue
        if kind == "bce":
            y = rng.integers(0, 2, size=(n, widths[-1])).astype(float)
        elif kind == "cce":
            y = np.eye(widths[-1])[rng.integers(0, widths[-1], size=n)]
        else:
            y = rng.normal(size=(n, widths[-1]))
        return layers, x, y, nn.LossKind(kind)


def max_relative_error(a, b, floor=1e-7):
    worst = 0.0
    for ga, gb in zip(a, b):
        for pa, pb in ((ga.weights, gb.weights), (ga.bias, gb.bias)):
            denom = np.maximum(np.maximum(np.abs(pa), np.abs(pb)), floor)
            worst = max(worst, float(np.max(np.abs(pa - pb) / denom)))
    return worst


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, text): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    n, text = marker.args
    key = (n, text)
    ok = report.passed
    _ACCEPTANCE[key] = _ACCEPTANCE.get(key, True) and ok


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for (n, text), ok in sorted(_ACCEPTANCE.items()):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {text}")
