"""Multinomial logistic regression and ReLU MLP on flat parameter vectors.

Layout of a parameter vector: for every dense layer, the weight matrix
``(fan_in, fan_out)`` in row-major order followed by its bias ``(fan_out,)``.
MLR is the zero-hidden-layer case plus an l2 term over all parameters.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidInputError

MLR = "MLR"
MLP = "MLP"


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    hidden_dims: tuple = ()
    num_classes: int = 10
    l2_reg: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.kind not in (MLR, MLP):
            raise InvalidInputError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 1:
            raise InvalidInputError("input_dim and num_classes must be positive")
        if any(h < 1 for h in self.hidden_dims):
            raise InvalidInputError("hidden widths must be positive")
        if self.kind == MLR and self.hidden_dims:
            raise InvalidInputError("MLR has no hidden layers")
        if self.kind == MLP and not self.hidden_dims:
            raise InvalidInputError("MLP needs at least one hidden layer")
        if self.l2_reg < 0:
            raise InvalidInputError("l2_reg must be nonnegative")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.num_classes]


# "paper-count" matches the 79510-parameter DNN; "paper-text" has two hidden layers.
PRESETS = {
    "mlr": lambda: ModelSpec(MLR, 784, (), 10, 1e-3),
    "paper-count": lambda: ModelSpec(MLP, 784, (100,), 10),
    "paper-text": lambda: ModelSpec(MLP, 784, (100, 100), 10),
}


def preset(name: str) -> ModelSpec:
    try:
        spec = PRESETS[name]()
    except KeyError:
        raise InvalidInputError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    return spec


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(1, -1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.shape[0] != self.labels.shape[0]:
            raise DimensionError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )

    def __len__(self):
        return self.labels.shape[0]


def param_count(spec: ModelSpec) -> int:
    sizes = spec.layer_sizes
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def _unpack(spec: ModelSpec, params: np.ndarray):
    sizes = spec.layer_sizes
    layers = []
    offset = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset:offset + fan_out]
        offset += fan_out
        layers.append((W, b))
    return layers


def _check(spec: ModelSpec, params: np.ndarray, batch: Batch):
    if params.shape != (param_count(spec),):
        raise DimensionError(f"params have shape {params.shape}, model needs ({param_count(spec)},)")
    if batch.features.shape[1] != spec.input_dim:
        raise DimensionError(f"features have {batch.features.shape[1]} columns, model needs {spec.input_dim}")
    if len(batch) == 0:
        raise InvalidInputError("empty batch")
    if batch.labels.min() < 0 or batch.labels.max() >= spec.num_classes:
        raise InvalidInputError(f"label out of range [0, {spec.num_classes})")


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases. MLR starts at zero."""
    if spec.kind == MLR:
        return np.zeros(param_count(spec))
    if spec.hidden_dims not in ((100,), (100, 100)):
        warnings.warn(f"hidden layers {spec.hidden_dims} match neither built-in preset", stacklevel=2)
    chunks = []
    sizes = spec.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def _forward(layers, X):
    acts = [X]
    h = X
    for W, b in layers[:-1]:
        h = np.maximum(h @ W + b, 0.0)
        acts.append(h)
    W, b = layers[-1]
    return acts, h @ W + b


def logits(spec: ModelSpec, params, features) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    return _forward(_unpack(spec, params), np.asarray(features, dtype=np.float64))[1]


def loss_and_grad(spec: ModelSpec, params, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy (+ l2 for MLR) and its gradient by backpropagation."""
    params = np.asarray(params, dtype=np.float64)
    _check(spec, params, batch)
    layers = _unpack(spec, params)
    acts, z = _forward(layers, batch.features)
    n = len(batch)
    idx = np.arange(n)

    z = z - z.max(axis=1, keepdims=True)
    expz = np.exp(z)
    denom = expz.sum(axis=1)
    loss = float(np.mean(np.log(denom) - z[idx, batch.labels]))

    delta = expz / denom[:, None]
    delta[idx, batch.labels] -= 1.0
    delta /= n

    grads = []
    for layer in range(len(layers) - 1, -1, -1):
        W, _ = layers[layer]
        h = acts[layer]
        grads.append(delta.sum(axis=0))
        grads.append((h.T @ delta).reshape(-1))
        if layer > 0:
            delta = (delta @ W.T) * (h > 0)
    grad = np.concatenate(grads[::-1])

    if spec.kind == MLR and spec.l2_reg > 0:
        loss += 0.5 * spec.l2_reg * float(np.dot(params, params))
        grad += spec.l2_reg * params
    return loss, grad


def predict(spec: ModelSpec, params, features) -> np.ndarray:
    # np.argmax picks the lowest index on ties
    return np.argmax(logits(spec, params, features), axis=1)


def accuracy(spec: ModelSpec, params, data: Batch) -> float:
    if len(data) == 0:
        raise InvalidInputError("empty data")
    params = np.asarray(params, dtype=np.float64)
    _check(spec, params, data)
    return float(np.mean(predict(spec, params, data.features) == data.labels))


@dataclass
class NeuralModel:
    """Binds a spec to the ``loss_and_grad(params, batch)`` interface the solvers use."""

    spec: ModelSpec
    dim: int = field(init=False)

    def __post_init__(self):
        self.dim = param_count(self.spec)

    def loss_and_grad(self, params, batch):
        return loss_and_grad(self.spec, params, batch)

    def accuracy(self, params, data):
        return accuracy(self.spec, params, data)

    def init_params(self, rng):
        return init_params(self.spec, rng)


@dataclass
class QuadraticModel:
    """Stub loss 0.5 * ||theta - target||^2 that ignores the batch.

    ``target=None`` gives the identically-zero loss.
    """

    target: np.ndarray | None
    dim: int = 0

    def __post_init__(self):
        if self.target is not None:
            self.target = np.asarray(self.target, dtype=np.float64)
            self.dim = self.target.shape[0]

    def loss_and_grad(self, params, batch=None):
        params = np.asarray(params, dtype=np.float64)
        if self.target is None:
            return 0.0, np.zeros_like(params)
        if params.shape != self.target.shape:
            raise DimensionError(f"params {params.shape} vs target {self.target.shape}")
        r = params - self.target
        return 0.5 * float(np.dot(r, r)), r

    def accuracy(self, params, data):
        return float("nan")

    def init_params(self, rng):
        return np.zeros(self.dim)
