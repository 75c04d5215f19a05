"""Shared client/server architecture: MLP feature encoder plus linear classifier.

Parameters live as immutable tensors; training replaces the whole model.
The flat-parameter layout is frozen so aggregation across independently
built clients is well defined: layers first to last (encoder layers, then
the classifier), and within a layer the weight matrix in row-major order
followed by the bias row.  Weight[i][j] connects input unit i to output
unit j.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Tensor
from .errors import InvalidConfig, LengthMismatch, ShapeMismatch


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dims: tuple[int, ...]
    feature_dim: int
    num_classes: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.feature_dim)
        if any(d < 1 for d in dims):
            raise InvalidConfig(f"non-positive layer dimension in {dims}")
        if self.feature_dim < 1 or self.num_classes < 2:
            raise InvalidConfig("need feature_dim >= 1 and num_classes >= 2")

    @property
    def layer_shapes(self) -> tuple[tuple[int, int], ...]:
        """(fan_in, fan_out) per layer, classifier last."""
        dims = (self.input_dim, *self.hidden_dims, self.feature_dim)
        encoder = tuple(zip(dims[:-1], dims[1:]))
        return (*encoder, (self.feature_dim, self.num_classes))


def parameter_count(config: ModelConfig) -> int:
    return sum(fi * fo + fo for fi, fo in config.layer_shapes)


@dataclass(frozen=True)
class Model:
    """Immutable parameter snapshot; encoder layers then classifier."""

    config: ModelConfig
    weights: tuple[Tensor, ...]
    biases: tuple[Tensor, ...]

    def param_tensors(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def watched(self, tape: GradTape) -> "Model":
        """Same parameters, registered on the tape for differentiation."""
        return Model(self.config,
                     tuple(tape.watch(w) for w in self.weights),
                     tuple(tape.watch(b) for b in self.biases))


def init_model(config: ModelConfig) -> Model:
    """Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) weights, zero biases."""
    rng = np.random.default_rng(config.seed)
    weights, biases = [], []
    for fan_in, fan_out in config.layer_shapes:
        bound = np.sqrt(1.0 / fan_in)
        weights.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out))))
        biases.append(Tensor(np.zeros((1, fan_out))))
    return Model(config, tuple(weights), tuple(biases))


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    # Bias is expanded through ones @ b so no row broadcasting is needed.
    ones = Tensor(np.ones((x.shape[0], 1)))
    return ad.add(ad.matmul(x, w), ad.matmul(ones, b))


def encode(model: Model, batch: Tensor) -> Tensor:
    """Map a (B, input_dim) batch to (B, feature_dim) features."""
    if batch.ndim != 2 or batch.shape[1] != model.config.input_dim:
        raise ShapeMismatch(
            f"encode: batch {batch.shape} vs input_dim {model.config.input_dim}")
    n_encoder = len(model.config.hidden_dims) + 1
    h = batch
    for i in range(n_encoder):
        h = _affine(h, model.weights[i], model.biases[i])
        if i < n_encoder - 1:
            h = ad.relu(h)
    return h


def classify(model: Model, features: Tensor) -> Tensor:
    """Map (B, feature_dim) features to (B, num_classes) logits."""
    if features.ndim != 2 or features.shape[1] != model.config.feature_dim:
        raise ShapeMismatch(
            f"classify: features {features.shape} vs feature_dim "
            f"{model.config.feature_dim}")
    return _affine(features, model.weights[-1], model.biases[-1])


def flatten_params(model: Model) -> np.ndarray:
    parts = []
    for w, b in zip(model.weights, model.biases):
        parts.append(w.data.reshape(-1))
        parts.append(b.data.reshape(-1))
    return np.concatenate(parts)


def unflatten_params(config: ModelConfig, vector: np.ndarray) -> Model:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1 or vector.size != parameter_count(config):
        raise LengthMismatch(
            f"expected {parameter_count(config)} parameters, got {vector.size}")
    weights, biases, off = [], [], 0
    for fan_in, fan_out in config.layer_shapes:
        n = fan_in * fan_out
        weights.append(Tensor(vector[off:off + n].reshape(fan_in, fan_out)))
        off += n
        biases.append(Tensor(vector[off:off + fan_out].reshape(1, fan_out)))
        off += fan_out
    return Model(config, tuple(weights), tuple(biases))


def model_from_params(config: ModelConfig, params: list[Tensor]) -> Model:
    """Rebuild a model from param_tensors() ordering (post-SGD)."""
    if len(params) != 2 * len(config.layer_shapes):
        raise LengthMismatch(
            f"expected {2 * len(config.layer_shapes)} tensors, got {len(params)}")
    weights = tuple(Tensor(t.data) for t in params[0::2])
    biases = tuple(Tensor(t.data) for t in params[1::2])
    return Model(config, weights, biases)
