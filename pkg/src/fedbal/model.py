"""Small numpy classifiers: softmax regression and a one-hidden-layer tanh MLP.

Parameters live in one flat float64 vector. For softmax regression the
layout is ``W (d x c) | b (c)``; with a hidden layer it is
``W1 (d x h) | b1 (h) | W2 (h x c) | b2 (c)``, all row-major.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from fedbal.data import DatasetHandle


class NonFiniteLossError(ArithmeticError):
    def __init__(self, index: int):
        super().__init__(f"non-finite loss at sample index {index}")
        self.index = index


class DivergenceError(ArithmeticError):
    def __init__(self, epoch: int):
        super().__init__(f"weights became non-finite during epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class Layout:
    input_dim: int
    hidden_dim: int
    num_classes: int

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 0 or self.num_classes < 2:
            raise ValueError(f"invalid layout {self}")

    @property
    def size(self) -> int:
        d, h, c = self.input_dim, self.hidden_dim, self.num_classes
        if h == 0:
            return d * c + c
        return d * h + h + h * c + c

    def shapes(self) -> list[tuple[int, ...]]:
        d, h, c = self.input_dim, self.hidden_dim, self.num_classes
        if h == 0:
            return [(d, c), (c,)]
        return [(d, h), (h,), (h, c), (c,)]

    def input_weight_slice(self) -> slice:
        """Flat positions of the weights that multiply raw input features."""
        cols = self.hidden_dim or self.num_classes
        return slice(0, self.input_dim * cols)


@dataclass(frozen=True, eq=False)
class WeightVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if values.size != self.layout.size:
            raise ValueError(f"weight length {values.size} does not match layout size {self.layout.size}")
        if not np.all(np.isfinite(values)):
            raise ValueError("weights must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WeightVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class TrainOutcome:
    updated_weights: WeightVector
    per_sample_losses: dict[int, float]
    epochs_completed: int


def _unpack(values: np.ndarray, layout: Layout) -> list[np.ndarray]:
    parts, offset = [], 0
    for shape in layout.shapes():
        n = int(np.prod(shape))
        parts.append(values[offset : offset + n].reshape(shape))
        offset += n
    return parts


def init_model(layout: Layout, rng: np.random.Generator) -> WeightVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer, biases included."""
    chunks = []
    fan_in = layout.input_dim
    for shape in layout.shapes():
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
        if len(shape) == 2:
            continue
        # a bias closes the layer; the next layer's fan-in is this width
        fan_in = shape[0]
    return WeightVector(np.concatenate(chunks), layout)


def _logits(values: np.ndarray, layout: Layout, X: np.ndarray) -> np.ndarray:
    if layout.hidden_dim == 0:
        W, b = _unpack(values, layout)
        return X @ W + b
    W1, b1, W2, b2 = _unpack(values, layout)
    return np.tanh(X @ W1 + b1) @ W2 + b2


def _cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample CE and softmax probabilities via log-sum-exp."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    losses = lse - shifted[np.arange(len(y)), y]
    probs = np.exp(shifted - lse[:, None])
    return losses, probs


def loss_and_grad(values: np.ndarray, layout: Layout, X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return per-sample losses and the gradient of their mean."""
    n = len(y)
    if layout.hidden_dim == 0:
        W, b = _unpack(values, layout)
        losses, probs = _cross_entropy(X @ W + b, y)
        delta = probs
        delta[np.arange(n), y] -= 1.0
        delta /= n
        return losses, np.concatenate([(X.T @ delta).ravel(), delta.sum(axis=0)])
    W1, b1, W2, b2 = _unpack(values, layout)
    hidden = np.tanh(X @ W1 + b1)
    losses, probs = _cross_entropy(hidden @ W2 + b2, y)
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n
    g_W2 = hidden.T @ delta
    g_b2 = delta.sum(axis=0)
    d_hidden = (delta @ W2.T) * (1.0 - hidden**2)
    g_W1 = X.T @ d_hidden
    g_b1 = d_hidden.sum(axis=0)
    return losses, np.concatenate([g_W1.ravel(), g_b1, g_W2.ravel(), g_b2])


def forward_losses(weights: WeightVector, dataset: DatasetHandle, indices: Sequence[int]) -> dict[int, float]:
    """Cross-entropy of each requested sample under ``weights``."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        return {}
    logits = _logits(weights.values, weights.layout, dataset.features[idx])
    losses, _ = _cross_entropy(logits, dataset.labels[idx])
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise NonFiniteLossError(int(idx[bad[0]]))
    return dict(zip(idx.tolist(), losses.tolist()))


def predict(weights: WeightVector, features: np.ndarray) -> np.ndarray:
    return np.argmax(_logits(weights.values, weights.layout, features), axis=1)


def accuracy(weights: WeightVector, features: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(weights, features) == labels))


def run_sgd(
    weights_global: WeightVector,
    dataset: DatasetHandle,
    epoch_orders: Iterable[np.ndarray],
    batch_size: int,
    lr: float,
    mu: float,
) -> TrainOutcome:
    """Mini-batch SGD over pre-ordered index lists, one list per epoch.

    The recorded loss of a sample is the plain cross-entropy from its last
    forward pass, taken before that batch's update.
    """
    layout = weights_global.layout
    anchor = weights_global.values
    w = anchor.copy()
    seen: dict[int, float] = {}
    epochs = 0
    for epoch, order in enumerate(epoch_orders, start=1):
        order = np.asarray(order, dtype=np.int64)
        for start in range(0, order.size, batch_size):
            batch = order[start : start + batch_size]
            losses, grad = loss_and_grad(w, layout, dataset.features[batch], dataset.labels[batch])
            if mu:
                # implicit step on the proximal term: stable for any lr*mu
                w = (w - lr * grad + (lr * mu) * anchor) / (1.0 + lr * mu)
            else:
                w -= lr * grad
            seen.update(zip(batch.tolist(), losses.tolist()))
        if not np.all(np.isfinite(w)):
            raise DivergenceError(epoch)
        epochs = epoch
    return TrainOutcome(WeightVector(w, layout), seen, epochs)


def train_local(
    weights_global: WeightVector,
    dataset: DatasetHandle,
    selected_indices: Sequence[int],
    epochs: int,
    batch_size: int,
    lr: float,
    mu: float,
    rng: np.random.Generator,
) -> TrainOutcome:
    """Local training for ``epochs`` passes, reshuffled every epoch.

    The objective per sample is cross-entropy plus ``mu/2 * ||w - w_global||^2``.
    The cross-entropy part takes an explicit gradient step and the proximal
    part an implicit one, so large ``mu`` pulls toward ``w_global`` without
    overshooting.
    """
    selected = np.asarray(selected_indices, dtype=np.int64)
    if selected.size == 0:
        raise ValueError("selected_indices must be non-empty")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    orders = (rng.permutation(selected) for _ in range(epochs))
    return run_sgd(weights_global, dataset, orders, batch_size, lr, mu)


def gradient_check(
    weights: WeightVector, dataset: DatasetHandle, index: int, h: float = 1e-5, floor: float = 1e-6
) -> float:
    """Max relative error between the analytic and central-difference gradient.

    Each entry's error is ``|a - n| / max(|a|, |n|, floor)``. The floor keeps
    entries far below the finite-difference resolution from dominating.
    """
    layout = weights.layout
    X = dataset.features[index : index + 1]
    y = dataset.labels[index : index + 1]
    base = weights.values.copy()
    _, analytic = loss_and_grad(base, layout, X, y)
    numeric = np.empty_like(base)
    for j in range(base.size):
        orig = base[j]
        base[j] = orig + h
        up = _cross_entropy(_logits(base, layout, X), y)[0][0]
        base[j] = orig - h
        down = _cross_entropy(_logits(base, layout, X), y)[0][0]
        base[j] = orig
        numeric[j] = (up - down) / (2 * h)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
