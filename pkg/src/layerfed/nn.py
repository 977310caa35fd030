"""Dense neural-network engine with hand-written backpropagation.

Everything here is float64 (wider float types pass through untouched) and
pure: functions take layer lists and return new arrays or layers, nothing is
mutated in place.  Weight matrices are stored
``(out_features, in_features)`` and batches are row-major ``(n, features)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ShapeError

ACTIVATIONS = ("relu", "sigmoid", "softmax", "identity")

# Cross-entropy clamp on probabilities before taking logs.
CE_CLAMP = 1e-12
# Sigmoid pre-activations are clipped here so outputs stay strictly in (0, 1).
_SIGMOID_ZMAX = 36.0


def _as_float(x) -> np.ndarray:
    x = np.asarray(x)
    return x.astype(np.result_type(x.dtype, np.float64), copy=False)


class LossKind(str, Enum):
    BINARY_CROSS_ENTROPY = "bce"
    CATEGORICAL_CROSS_ENTROPY = "cce"
    MEAN_SQUARED_ERROR = "mse"


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weights = _as_float(self.weights)
        self.bias = _as_float(self.bias)
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2:
            raise ShapeError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match "
                f"{self.weights.shape[0]} output units"
            )

    @property
    def in_features(self) -> int:
        return self.weights.shape[1]

    @property
    def out_features(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)

    def same_as(self, other: "DenseLayer") -> bool:
        """Bitwise equality of parameters and activation."""
        return (
            self.activation == other.activation
            and self.weights.shape == other.weights.shape
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.bias, other.bias)
        )


@dataclass
class LayerGrad:
    weights: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class LayerSpec:
    in_features: int
    out_features: int
    activation: str = "relu"


GradientSet = list  # list[LayerGrad], one entry per layer


def layer_specs(input_dim: int, widths: Sequence[int], activations: Sequence[str]) -> list[LayerSpec]:
    """Chain ``widths`` into LayerSpecs starting from ``input_dim``."""
    if len(widths) != len(activations):
        raise ConfigurationError(
            f"{len(widths)} widths but {len(activations)} activations"
        )
    specs = []
    fan_in = input_dim
    for width, act in zip(widths, activations):
        specs.append(LayerSpec(fan_in, width, act))
        fan_in = width
    return specs


def validate_network(layers: Sequence[DenseLayer]) -> None:
    if not layers:
        raise ConfigurationError("network has no layers")
    for i, layer in enumerate(layers):
        if layer.activation == "softmax" and i != len(layers) - 1:
            raise ConfigurationError(f"layer {i}: softmax is only allowed on the output layer")
        if i > 0 and layer.in_features != layers[i - 1].out_features:
            raise ShapeError(
                f"layer {i} expects {layer.in_features} inputs but layer {i - 1} "
                f"produces {layers[i - 1].out_features}"
            )


# -- activations -------------------------------------------------------------

def _sigmoid(z):
    z = np.clip(z, -_SIGMOID_ZMAX, _SIGMOID_ZMAX)
    return 1.0 / (1.0 + np.exp(-z))


def _softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return _sigmoid(z)
    if activation == "softmax":
        return _softmax(z)
    if activation == "identity":
        return z
    raise ConfigurationError(f"unknown activation {activation!r}")


def _activation_vjp(grad_a, z, a, activation):
    """Pull dL/da back through the activation to dL/dz."""
    if activation == "relu":
        return grad_a * (z > 0.0)
    if activation == "sigmoid":
        return grad_a * a * (1.0 - a)
    if activation == "softmax":
        return a * (grad_a - np.sum(grad_a * a, axis=1, keepdims=True))
    return grad_a


# -- forward / loss / backward -----------------------------------------------

def forward(layers: Sequence[DenseLayer], batch: np.ndarray):
    """Run ``batch`` through ``layers``.

    Returns ``(output, cache)`` where ``cache[i] = (inputs, z, a)`` holds the
    inputs, pre-activations and activations of layer ``i``.
    """
    a = _as_float(batch)
    if a.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got shape {a.shape}")
    cache = []
    for i, layer in enumerate(layers):
        if a.shape[1] != layer.in_features:
            raise ShapeError(
                f"layer {i} expects {layer.in_features} input features, got {a.shape[1]}"
            )
        z = a @ layer.weights.T + layer.bias
        out = activate(z, layer.activation)
        cache.append((a, z, out))
        a = out
    return a, cache


def predict(layers: Sequence[DenseLayer], batch: np.ndarray) -> np.ndarray:
    return forward(layers, batch)[0]


def check_loss_compatible(activation: str, loss: LossKind) -> None:
    loss = LossKind(loss)
    if loss is LossKind.BINARY_CROSS_ENTROPY and activation != "sigmoid":
        raise ConfigurationError(f"binary cross-entropy needs a sigmoid output, got {activation}")
    if loss is LossKind.CATEGORICAL_CROSS_ENTROPY and activation != "softmax":
        raise ConfigurationError(f"categorical cross-entropy needs a softmax output, got {activation}")


def default_loss(output_activation: str) -> LossKind:
    if output_activation == "sigmoid":
        return LossKind.BINARY_CROSS_ENTROPY
    if output_activation == "softmax":
        return LossKind.CATEGORICAL_CROSS_ENTROPY
    return LossKind.MEAN_SQUARED_ERROR


def loss_value(output: np.ndarray, targets: np.ndarray, loss: LossKind) -> float:
    """Batch-mean loss.

    BCE and CCE sum over output units and average over rows; MSE averages over
    every entry.
    """
    loss = LossKind(loss)
    targets = _as_float(targets)
    if targets.shape != output.shape:
        raise ShapeError(f"targets shape {targets.shape} != output shape {output.shape}")
    n = output.shape[0]
    if loss is LossKind.MEAN_SQUARED_ERROR:
        value = np.mean((output - targets) ** 2)
    else:
        p = np.clip(output, CE_CLAMP, 1.0 - CE_CLAMP)
        if loss is LossKind.BINARY_CROSS_ENTROPY:
            ll = targets * np.log(p) + (1.0 - targets) * np.log1p(-p)
        else:
            ll = targets * np.log(p)
        value = np.maximum(0.0, -np.sum(ll) / n)
    # keep extended precision when the caller works in it
    return value if value.dtype.itemsize > 8 else float(value)


def network_loss(layers, batch, targets, loss) -> float:
    out, _ = forward(layers, batch)
    return loss_value(out, targets, loss)


def backward(layers: Sequence[DenseLayer], cache, targets: np.ndarray, loss: LossKind) -> list[LayerGrad]:
    """Exact gradients of the batch-mean ``loss`` for every layer."""
    loss = LossKind(loss)
    out_act = layers[-1].activation
    check_loss_compatible(out_act, loss)
    _, z_last, output = cache[-1]
    targets = _as_float(targets)
    if targets.shape != output.shape:
        raise ShapeError(f"targets shape {targets.shape} != output shape {output.shape}")
    n = output.shape[0]

    if loss is LossKind.MEAN_SQUARED_ERROR:
        grad_a = 2.0 * (output - targets) / output.size
        delta = _activation_vjp(grad_a, z_last, output, out_act)
    else:
        # sigmoid+BCE and softmax+CCE share the (p - y) form
        delta = (output - targets) / n

    grads: list[LayerGrad] = [None] * len(layers)  # type: ignore[list-item]
    for i in range(len(layers) - 1, -1, -1):
        a_in, _, _ = cache[i]
        grads[i] = LayerGrad(delta.T @ a_in, delta.sum(axis=0))
        if i > 0:
            _, z_prev, a_prev = cache[i - 1]
            grad_a = delta @ layers[i].weights
            delta = _activation_vjp(grad_a, z_prev, a_prev, layers[i - 1].activation)
    return grads


def gradients(layers, batch, targets, loss) -> list[LayerGrad]:
    _, cache = forward(layers, batch)
    return backward(layers, cache, targets, loss)


def finite_diff_grad(layers, batch, targets, loss, epsilon: float = 1e-5,
                     dtype=np.float64) -> list[LayerGrad]:
    """Central-difference gradient estimate, one parameter at a time.

    ``dtype`` sets the working precision of the loss evaluations. In float64
    the rounding error of a difference quotient is about ``1e-16 * |L| / epsilon``,
    which swamps entries near 1e-7; ``np.longdouble`` pushes that floor down
    where the platform has extended precision. Results are returned as float64.
    """
    if not epsilon > 0:
        raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
    work = [DenseLayer(l.weights.astype(dtype), l.bias.astype(dtype), l.activation) for l in layers]
    batch = np.asarray(batch).astype(dtype)
    targets = np.asarray(targets).astype(dtype)
    result = []
    for layer in work:
        entries = []
        for param in (layer.weights, layer.bias):
            est = np.zeros_like(param)
            flat = param.reshape(-1)
            out = est.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + epsilon
                hi = flat[k]
                up = network_loss(work, batch, targets, loss)
                flat[k] = orig - epsilon
                lo = flat[k]
                down = network_loss(work, batch, targets, loss)
                flat[k] = orig
                # divide by the step actually taken, not the nominal 2 * epsilon
                out[k] = (up - down) / (hi - lo)
            entries.append(est.astype(np.float64))
        result.append(LayerGrad(*entries))
    return result


def sgd_step(layers: Sequence[DenseLayer], grads: Sequence[LayerGrad], eta: float,
             trainable: Sequence[bool] | None = None) -> list[DenseLayer]:
    """Return ``W - eta * grad`` for every layer (frozen layers pass through)."""
    if not eta > 0:
        raise ConfigurationError(f"learning rate must be positive, got {eta}")
    if len(grads) != len(layers):
        raise ShapeError(f"{len(grads)} gradient entries for {len(layers)} layers")
    if trainable is None:
        trainable = [True] * len(layers)
    updated = []
    for i, (layer, g, train) in enumerate(zip(layers, grads, trainable)):
        if not train:
            updated.append(layer)
            continue
        if g.weights.shape != layer.weights.shape or g.bias.shape != layer.bias.shape:
            raise ShapeError(
                f"layer {i}: gradient shapes {g.weights.shape}/{g.bias.shape} do not match "
                f"parameters {layer.weights.shape}/{layer.bias.shape}"
            )
        updated.append(DenseLayer(layer.weights - eta * g.weights,
                                  layer.bias - eta * g.bias, layer.activation))
    return updated


def init_weights(specs: Iterable[LayerSpec], seed: int) -> list[DenseLayer]:
    """He-normal for ReLU layers, Glorot-uniform otherwise, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, spec in enumerate(specs):
        if spec.in_features <= 0 or spec.out_features <= 0:
            raise ConfigurationError(
                f"layer {i}: widths must be positive, got {spec.in_features}->{spec.out_features}"
            )
        shape = (spec.out_features, spec.in_features)
        if spec.activation == "relu":
            w = rng.normal(0.0, np.sqrt(2.0 / spec.in_features), size=shape)
        else:
            limit = np.sqrt(6.0 / (spec.in_features + spec.out_features))
            w = rng.uniform(-limit, limit, size=shape)
        layers.append(DenseLayer(w, np.zeros(spec.out_features), spec.activation))
    validate_network(layers)
    return layers


def all_finite(layers: Sequence[DenseLayer]) -> bool:
    return all(np.isfinite(l.weights).all() and np.isfinite(l.bias).all() for l in layers)
