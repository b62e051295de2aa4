"""Dense feed-forward classifier with hand-written forward/backward passes.

Every function here is pure: models and gradient sets are immutable value
objects and all updates return fresh arrays. The last layer is the
classification ("target") layer whose weight rows the attack reads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "leaky_relu", "identity")


class ConfigurationError(ValueError):
    """Raised when shapes or layer settings do not fit together."""


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "relu"
    slope: float = 0.01

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigurationError("layer dimensions must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.activation == "leaky_relu" and not 0.0 < self.slope < 1.0:
            raise ConfigurationError("leaky_relu slope must lie in (0, 1)")


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (output_dim, input_dim)
    bias: np.ndarray  # (output_dim,)
    spec: LayerSpec


@dataclass(frozen=True)
class Model:
    """Ordered dense layers; the final layer emits logits for ``class_count`` classes.

    ``dropout`` is the drop probability applied to hidden activations during
    training only (see :func:`with_dropout`).
    """

    layers: tuple[Layer, ...]
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if not self.layers:
            raise ConfigurationError("model needs at least one layer")
        for i, layer in enumerate(self.layers):
            s = layer.spec
            if layer.weight.shape != (s.output_dim, s.input_dim):
                raise ConfigurationError(f"layer {i}: weight shape {layer.weight.shape} != {(s.output_dim, s.input_dim)}")
            if layer.bias.shape != (s.output_dim,):
                raise ConfigurationError(f"layer {i}: bias shape {layer.bias.shape} != {(s.output_dim,)}")
            if i > 0 and self.layers[i - 1].spec.output_dim != s.input_dim:
                raise ConfigurationError(f"layer {i}: input_dim does not chain with previous output_dim")
            if s.activation == "identity" and i != len(self.layers) - 1:
                raise ConfigurationError("identity activation is only allowed on the final layer")
        if self.layers[-1].spec.activation != "identity":
            raise ConfigurationError("final layer must be an identity (logit) layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout rate must lie in [0, 1)")

    @property
    def class_count(self) -> int:
        return self.layers[-1].spec.output_dim

    @property
    def input_dim(self) -> int:
        return self.layers[0].spec.input_dim

    @property
    def target_width(self) -> int:
        """Number of inputs feeding the classification layer."""
        return self.layers[-1].spec.input_dim

    @property
    def specs(self) -> tuple[LayerSpec, ...]:
        return tuple(layer.spec for layer in self.layers)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int = field(default=0)

    def __post_init__(self) -> None:
        if self.inputs.ndim != 2 or len(self.inputs) == 0:
            raise ConfigurationError("batch inputs must be a nonempty 2-D array")
        if self.labels.shape != (len(self.inputs),):
            raise ConfigurationError("labels must be a vector with one entry per input row")
        if self.class_count and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConfigurationError("label index out of range")

    def one_hot(self, n: int) -> np.ndarray:
        y = np.zeros((len(self.labels), n))
        y[np.arange(len(self.labels)), self.labels] = 1.0
        return y


@dataclass(frozen=True)
class GradientSet:
    """Per-layer ``(weight_grad, bias_grad)`` pairs, shaped like the model."""

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]


def init_model(
    sizes: Sequence[int],
    activation: str = "relu",
    *,
    slope: float = 0.01,
    rng: np.random.Generator | int | None = None,
) -> Model:
    """Build a model with layer widths ``sizes = [input, hidden..., classes]``.

    Weights are drawn uniformly from ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``;
    biases start at zero.
    """
    if len(sizes) < 2:
        raise ConfigurationError("sizes needs an input width and a class count")
    rng = np.random.default_rng(rng)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = "identity" if i == len(sizes) - 2 else activation
        spec = LayerSpec(int(fan_in), int(fan_out), act, slope)
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), spec))
    return Model(tuple(layers))


def with_dropout(model: Model, rate: float) -> Model:
    """Copy of ``model`` that drops hidden activations at ``rate`` while training."""
    return Model(model.layers, dropout=rate)


def _activate(z: np.ndarray, spec: LayerSpec) -> np.ndarray:
    if spec.activation == "relu":
        return np.maximum(z, 0.0)
    if spec.activation == "leaky_relu":
        return np.where(z > 0, z, spec.slope * z)
    return z


def _activation_grad(z: np.ndarray, spec: LayerSpec) -> np.ndarray:
    if spec.activation == "relu":
        return (z > 0).astype(z.dtype)
    if spec.activation == "leaky_relu":
        return np.where(z > 0, 1.0, spec.slope)
    return np.ones_like(z)


def _as_inputs(model: Model, batch: Batch | np.ndarray) -> np.ndarray:
    x = batch.inputs if isinstance(batch, Batch) else np.atleast_2d(np.asarray(batch, dtype=float))
    if x.shape[1] != model.input_dim:
        raise ConfigurationError(f"input dim {x.shape[1]} does not match model input dim {model.input_dim}")
    return x


def forward(
    model: Model,
    batch: Batch | np.ndarray,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, dict]:
    """Return ``(logits, cache)``.

    The cache holds each layer's input (post-activation output of the layer
    before it), the pre-activations and any dropout masks. Dropout is applied
    only when ``rng`` is given and the model has a nonzero rate.
    """
    x = _as_inputs(model, batch)
    outputs = [x]
    pre = []
    masks = []
    h = x
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        z = h @ layer.weight.T + layer.bias
        pre.append(z)
        h = _activate(z, layer.spec)
        if i < last and rng is not None and model.dropout > 0.0:
            keep = 1.0 - model.dropout
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
            masks.append(mask)
        else:
            masks.append(None)
        outputs.append(h)
    return h, {"outputs": outputs, "pre": pre, "masks": masks}


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_norm - shifted[np.arange(len(labels)), labels]))


def loss_and_gradients(
    model: Model,
    batch: Batch,
    rng: np.random.Generator | None = None,
) -> tuple[float, GradientSet]:
    """Mean softmax cross-entropy over the batch and its exact gradients."""
    if batch.labels.min() < 0 or batch.labels.max() >= model.class_count:
        raise ConfigurationError("label index out of range for this model")
    logits, cache = forward(model, batch, rng)
    loss = cross_entropy(logits, batch.labels)
    n = len(batch.labels)
    delta = (softmax(logits) - batch.one_hot(model.class_count)) / n

    grads: list[tuple[np.ndarray, np.ndarray]] = []
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if i < len(model.layers) - 1:
            mask = cache["masks"][i]
            if mask is not None:
                delta = delta * mask
            delta = delta * _activation_grad(cache["pre"][i], layer.spec)
        h_in = cache["outputs"][i]
        grads.append((delta.T @ h_in, delta.sum(axis=0)))
        if i > 0:
            delta = delta @ layer.weight
    return loss, GradientSet(tuple(reversed(grads)))


def sgd_step(model: Model, grads: GradientSet, alpha: float) -> Model:
    """One plain SGD update ``theta - alpha * grad``; the input model is untouched."""
    if len(grads.layers) != len(model.layers):
        raise ConfigurationError("gradient set does not match model depth")
    new_layers = []
    for layer, (gw, gb) in zip(model.layers, grads.layers):
        if gw.shape != layer.weight.shape or gb.shape != layer.bias.shape:
            raise ConfigurationError("gradient shapes do not match model")
        new_layers.append(Layer(layer.weight - alpha * gw, layer.bias - alpha * gb, layer.spec))
    return Model(tuple(new_layers), model.dropout)


def target_layer_flat(model: Model) -> np.ndarray:
    """Final-layer weights flattened row-major: class ``i`` owns ``[i*m, (i+1)*m)``."""
    return model.layers[-1].weight.reshape(-1).copy()


def predict(model: Model, inputs: np.ndarray) -> np.ndarray:
    logits, _ = forward(model, inputs)
    return logits.argmax(axis=1)


def accuracy(model: Model, inputs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(model, inputs) == labels))


def parameter_count(model: Model) -> int:
    return sum(layer.weight.size + layer.bias.size for layer in model.layers)


def flatten(model: Model) -> np.ndarray:
    """All parameters as one vector, layer by layer, weight then bias."""
    parts = []
    for layer in model.layers:
        parts.append(layer.weight.reshape(-1))
        parts.append(layer.bias)
    return np.concatenate(parts)


def unflatten(template: Model, vector: np.ndarray) -> Model:
    """Inverse of :func:`flatten`, using ``template`` for shapes and specs."""
    vector = np.asarray(vector, dtype=float)
    if vector.shape != (parameter_count(template),):
        raise ConfigurationError("parameter vector length does not match model")
    layers = []
    pos = 0
    for layer in template.layers:
        w_size = layer.weight.size
        w = vector[pos:pos + w_size].reshape(layer.weight.shape).copy()
        pos += w_size
        b = vector[pos:pos + layer.bias.size].copy()
        pos += layer.bias.size
        layers.append(Layer(w, b, layer.spec))
    return Model(tuple(layers), template.dropout)
