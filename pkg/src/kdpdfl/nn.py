"""Small dense network engine on flat parameter vectors.

Layout of a model is ``[BatchNorm(input)] -> (Linear -> ReLU)* -> Linear``.
The batchnorm layer, when enabled, normalizes the raw input features; with
``input_dim=296, hidden_dims=[128], output_dim=9`` this gives 39,769
trainable parameters.

All trainable values live in one flat vector so that peers can exchange and
average models with plain vector arithmetic. Batchnorm running statistics
are carried alongside as non-trainable buffers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class NumericalError(ArithmeticError):
    """Raised when a forward pass produces non-finite values."""


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    use_batchnorm: bool = True
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all layer widths must be >= 1, got {dims}")
        if self.output_dim < 2:
            raise ValueError("output_dim must be >= 2")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def param_count(self) -> int:
        n = 2 * self.input_dim if self.use_batchnorm else 0
        return n + sum(a * b + b for a, b in self.layer_dims)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "use_batchnorm": self.use_batchnorm,
        }


@dataclass
class ParamVector:
    """Flat trainable parameters of one model plus batchnorm buffers."""

    arch: Architecture
    values: np.ndarray
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.arch.param_count,):
            raise ValueError(
                f"expected {self.arch.param_count} values, got shape {self.values.shape}"
            )
        if self.arch.use_batchnorm:
            d = self.arch.input_dim
            if self.running_mean is None:
                self.running_mean = np.zeros(d)
            if self.running_var is None:
                self.running_var = np.ones(d)

    @property
    def param_count(self) -> int:
        return self.values.size

    def copy(self) -> "ParamVector":
        return ParamVector(
            self.arch,
            self.values.copy(),
            None if self.running_mean is None else self.running_mean.copy(),
            None if self.running_var is None else self.running_var.copy(),
        )


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError(
                f"{self.features.shape[0]} feature rows but {self.labels.size} labels"
            )

    def __len__(self):
        return self.labels.size


@dataclass
class _Layers:
    gamma: np.ndarray | None
    beta: np.ndarray | None
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)


def _unpack(arch: Architecture, flat: np.ndarray) -> _Layers:
    # views into flat, so gradients written here land in the flat vector
    pos = 0
    gamma = beta = None
    if arch.use_batchnorm:
        d = arch.input_dim
        gamma, beta = flat[0:d], flat[d : 2 * d]
        pos = 2 * d
    layers = _Layers(gamma, beta)
    for a, b in arch.layer_dims:
        layers.weights.append(flat[pos : pos + a * b].reshape(a, b))
        pos += a * b
        layers.biases.append(flat[pos : pos + b])
        pos += b
    return layers


def init_model(arch: Architecture, seed: int) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; gamma=1, beta=0."""
    rng = np.random.default_rng(seed)
    values = np.empty(arch.param_count)
    layers = _unpack(arch, values)
    if arch.use_batchnorm:
        layers.gamma[:] = 1.0
        layers.beta[:] = 0.0
    for (fan_in, _), w, b in zip(arch.layer_dims, layers.weights, layers.biases):
        bound = 1.0 / np.sqrt(fan_in)
        w[:] = rng.uniform(-bound, bound, size=w.shape)
        b[:] = rng.uniform(-bound, bound, size=b.shape)
    return ParamVector(arch, values)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(labels.size), labels]))


def _check_batch(model: ParamVector, batch: Batch):
    if batch.features.shape[1] != model.arch.input_dim:
        raise ValueError(
            f"batch has {batch.features.shape[1]} features, model expects {model.arch.input_dim}"
        )
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.labels.min() < 0 or batch.labels.max() >= model.arch.output_dim:
        raise ValueError("labels out of range for model output_dim")


def _forward(model: ParamVector, x: np.ndarray, train_mode: bool):
    # overflow is reported below as NumericalError, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward_impl(model, x, train_mode)


def _forward_impl(model: ParamVector, x: np.ndarray, train_mode: bool):
    arch = model.arch
    layers = _unpack(arch, model.values)
    cache = {}
    h = x
    if arch.use_batchnorm:
        if train_mode:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
        else:
            mean, var = model.running_mean, model.running_var
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean) * inv_std
        h = layers.gamma * xhat + layers.beta
        cache.update(xhat=xhat, inv_std=inv_std, mean=mean, var=var)
    acts = [h]
    n_layers = len(layers.weights)
    for k, (w, b) in enumerate(zip(layers.weights, layers.biases)):
        h = h @ w + b
        if k < n_layers - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    if not np.all(np.isfinite(h)):
        raise NumericalError("non-finite activations in forward pass")
    cache["acts"] = acts
    return h, layers, cache


def forward(model: ParamVector, batch: Batch, train_mode: bool = False) -> tuple[np.ndarray, float]:
    """Return ``(pre-softmax logits, mean cross-entropy)``.

    ``train_mode`` normalizes with batch statistics; otherwise the running
    statistics are used.
    """
    _check_batch(model, batch)
    logits, _, _ = _forward(model, batch.features, train_mode)
    return logits, _cross_entropy(logits, batch.labels)


def predict_logits(model: ParamVector, features: np.ndarray) -> np.ndarray:
    """Eval-mode logits without labels."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != model.arch.input_dim:
        raise ValueError(
            f"features of shape {features.shape} do not fit input_dim={model.arch.input_dim}"
        )
    logits, _, _ = _forward(model, features, train_mode=False)
    return logits


def loss_and_grad(model: ParamVector, batch: Batch) -> tuple[float, np.ndarray]:
    """Train-mode loss and its analytic gradient w.r.t. ``model.values``."""
    _check_batch(model, batch)
    logits, layers, cache = _forward(model, batch.features, train_mode=True)
    n = len(batch)
    loss = _cross_entropy(logits, batch.labels)

    grad = np.zeros_like(model.values)
    g = _unpack(model.arch, grad)
    delta = softmax(logits)
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n

    acts = cache["acts"]
    for k in reversed(range(len(layers.weights))):
        g.weights[k][:] = acts[k].T @ delta
        g.biases[k][:] = delta.sum(axis=0)
        delta = delta @ layers.weights[k].T
        if k > 0:
            delta = delta * (acts[k] > 0)

    if model.arch.use_batchnorm:
        xhat, inv_std = cache["xhat"], cache["inv_std"]
        g.gamma[:] = (delta * xhat).sum(axis=0)
        g.beta[:] = delta.sum(axis=0)
    return loss, grad


def sgd_step(model: ParamVector, grad: np.ndarray, lr: float) -> ParamVector:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != model.values.shape:
        raise ValueError(f"grad shape {grad.shape} != params shape {model.values.shape}")
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    out = model.copy()
    out.values = model.values - lr * grad
    return out


def update_running_stats(model: ParamVector, features: np.ndarray) -> ParamVector:
    """Blend the batch's input statistics into the batchnorm running buffers."""
    if not model.arch.use_batchnorm:
        return model
    n = features.shape[0]
    mean = features.mean(axis=0)
    var = features.var(axis=0, ddof=1) if n > 1 else np.zeros(features.shape[1])
    out = model.copy()
    out.running_mean = (1 - BN_MOMENTUM) * model.running_mean + BN_MOMENTUM * mean
    out.running_var = (1 - BN_MOMENTUM) * model.running_var + BN_MOMENTUM * var
    return out


def train_step(model: ParamVector, batch: Batch, lr: float) -> tuple[ParamVector, float]:
    """One minibatch SGD step, including the running-statistics update."""
    loss, grad = loss_and_grad(model, batch)
    new = sgd_step(model, grad, lr)
    return update_running_stats(new, batch.features), loss


def combine(terms: Sequence[tuple[float, ParamVector]]) -> ParamVector:
    """Weighted elementwise sum of models sharing one architecture.

    Batchnorm buffers are combined with the same weights.
    """
    if not terms:
        raise ValueError("combine needs at least one term")
    arch = terms[0][1].arch
    for w, m in terms:
        if m.arch != arch:
            raise ValueError("cannot combine models with different architectures")
        if w < 0:
            raise ValueError(f"negative combination weight {w}")
    values = sum(w * m.values for w, m in terms)
    out = ParamVector(arch, np.array(values, dtype=np.float64))
    if arch.use_batchnorm:
        out.running_mean = sum(w * m.running_mean for w, m in terms)
        out.running_var = sum(w * m.running_var for w, m in terms)
    return out
