"""Per-client feed-forward classifiers: training and knowledge distillation.

Plain NumPy MLPs with ReLU hidden layers and identity output, trained by
mini-batch SGD.  Both the supervised and the distillation objective are the
temperature-scaled soft-target cross-entropy

    loss = tau^2 * mean_i CE(target_i, softmax(logits_i / tau))

with supervised training being the tau = 1, one-hot special case.  Updates
are deterministic given (model, data, seed, hyperparameters).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import DimensionMismatchError, TrainingDivergenceError


@dataclass(eq=False)
class MlpModel:
    """Weights (out, in) and biases per layer; hidden ReLU, identity output."""

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def num_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_outputs(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> "MlpModel":
        return MlpModel(self.layer_sizes,
                        [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases])


@dataclass(frozen=True, eq=False)
class SoftTarget:
    """A probability vector to distill toward at one proxy index."""

    proxy_index: int
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.min() < 0 or abs(p.sum() - 1.0) > 1e-6:
            raise ValueError("probs must be a probability vector")


def model_init(layer_sizes, seed: int) -> MlpModel:
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ValueError(f"layer_sizes needs >= 2 positive entries, got {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(sizes, weights, biases)


def forward_batch(model: MlpModel, X: np.ndarray) -> np.ndarray:
    """Logits for a batch; rows of X are inputs."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.num_inputs:
        raise DimensionMismatchError(
            f"expected (*, {model.num_inputs}) inputs, got {X.shape}")
    h = X
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        h = np.maximum(h @ w.T + b, 0.0)
    return h @ model.weights[-1].T + model.biases[-1]


def forward(model: MlpModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatchError("forward expects a single vector")
    return forward_batch(model, x[None, :])[0]


def softmax_t(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax along the last axis, max-subtracted for stability."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_gradients(model: MlpModel, X: np.ndarray, target_probs: np.ndarray,
                       temperature: float = 1.0):
    """Soft-target cross-entropy and its analytic parameter gradients.

    Returns (loss, weight_grads, bias_grads).  The loss carries the tau^2
    distillation scaling; gradients match it.
    """
    X = np.asarray(X, dtype=np.float64)
    P = np.asarray(target_probs, dtype=np.float64)
    batch = X.shape[0]
    activations = [X]
    h = X
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        h = np.maximum(h @ w.T + b, 0.0)
        activations.append(h)
    logits = h @ model.weights[-1].T + model.biases[-1]

    z = logits / temperature
    z_shift = z - z.max(axis=1, keepdims=True)
    log_q = z_shift - np.log(np.exp(z_shift).sum(axis=1, keepdims=True))
    loss = -(temperature ** 2) * float((P * log_q).sum()) / batch

    delta = (temperature / batch) * (np.exp(log_q) - P)
    weight_grads = [None] * len(model.weights)
    bias_grads = [None] * len(model.biases)
    for layer in reversed(range(len(model.weights))):
        weight_grads[layer] = delta.T @ activations[layer]
        bias_grads[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ model.weights[layer]) * (activations[layer] > 0)
    return loss, weight_grads, bias_grads


def _sgd_epochs(model: MlpModel, X: np.ndarray, P: np.ndarray, epochs: int,
                lr: float, batch_size: int, temperature: float,
                rng: np.random.Generator) -> list[float]:
    if lr <= 0:
        raise ValueError("lr must be positive")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = X.shape[0]
    epoch_losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            sel = order[start:start + batch_size]
            loss, gw, gb = loss_and_gradients(model, X[sel], P[sel], temperature)
            if not np.isfinite(loss):
                raise TrainingDivergenceError(f"loss became {loss}; lower lr")
            total += loss * sel.size
            for layer in range(len(model.weights)):
                model.weights[layer] -= lr * gw[layer]
                model.biases[layer] -= lr * gb[layer]
        epoch_losses.append(total / n)
    return epoch_losses


def train_supervised(model: MlpModel, dataset: Dataset, epochs: int, lr: float,
                     batch_size: int, seed: int) -> tuple[MlpModel, list[float]]:
    """Mini-batch SGD on cross-entropy against one-hot labels.

    Mutates and returns the model plus the mean loss per epoch; zero epochs
    leave the model untouched.
    """
    onehot = np.eye(model.num_outputs)[dataset.labels]
    rng = np.random.default_rng(seed)
    losses = _sgd_epochs(model, dataset.features, onehot, epochs, lr,
                         batch_size, 1.0, rng)
    return model, losses


def distill(model: MlpModel, proxy_features: np.ndarray,
            targets: list[SoftTarget], epochs: int, lr: float,
            temperature: float, seed: int, batch_size: int = 32) -> MlpModel:
    """Distill toward aggregated soft targets; no-op when targets are empty."""
    if not targets:
        return model
    proxy_features = np.asarray(proxy_features, dtype=np.float64)
    idx = np.array([t.proxy_index for t in targets], dtype=np.int64)
    if idx.min() < 0 or idx.max() >= proxy_features.shape[0]:
        raise ValueError("a target's proxy_index has no proxy features")
    X = proxy_features[idx]
    P = np.stack([np.asarray(t.probs, dtype=np.float64) for t in targets])
    rng = np.random.default_rng(seed)
    _sgd_epochs(model, X, P, epochs, lr, batch_size, temperature, rng)
    return model


def evaluate(model: MlpModel, test_set: Dataset) -> float:
    """Accuracy of argmax predictions; ties resolve to the lowest class id."""
    if len(test_set) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    preds = forward_batch(model, test_set.features).argmax(axis=1)
    return float((preds == test_set.labels).mean())
