"""From-scratch local trainers: multiclass logistic regression and a
one-hidden-layer tanh MLP, trained with minibatch SGD on softmax
cross-entropy plus an optional proximal term (mu/2)*||w - w_ref||^2.

No ML framework: the models are small enough that explicit numpy
arithmetic is clearer and keeps the dependency surface at zero.

Reproducibility contract: given (seed, weights, config, data) the fit
output is bit-for-bit deterministic, and clients in other languages can
match it. That requires pinning floating-point evaluation order, so the
matrix products below accumulate along the contracted axis in index
order (a handful of vectorized passes) instead of calling BLAS, whose
blocked summation order is unspecified. Model sizes here make this
essentially free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import Xoshiro256
from .tensors import Tensor, Weights

DEFAULT_BATCH_SIZE = 32
INIT_SPAN = 0.05


@dataclass(frozen=True)
class TrainerModel:
    """Architecture only; parameter values travel as Weights."""

    num_features: int
    num_classes: int
    hidden_width: int | None = None  # None selects plain logistic regression

    def __post_init__(self) -> None:
        if self.num_features < 1 or self.num_classes < 2:
            raise ValueError("need num_features >= 1 and num_classes >= 2")
        if self.hidden_width is not None and self.hidden_width < 1:
            raise ValueError("hidden_width must be >= 1")

    def tensor_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        d, k, h = self.num_features, self.num_classes, self.hidden_width
        if h is None:
            return [("w0", (d, k)), ("b0", (k,))]
        return [("w0", (d, h)), ("b0", (h,)), ("w1", (h, k)), ("b1", (k,))]


def init_weights(model: TrainerModel, seed: int) -> Weights:
    """Seeded uniform(-0.05, 0.05) matrices, zero biases.

    Matrix entries are drawn flat in row-major order from one xoshiro
    stream; biases consume no draws. Fixed so any runtime can rebuild
    the same starting point from the seed alone.
    """
    rng = Xoshiro256(seed)
    tensors = []
    for name, shape in model.tensor_shapes():
        if name.startswith("b"):
            tensors.append(Tensor(name, np.zeros(shape, dtype=np.float64)))
        else:
            n = int(np.prod(shape))
            flat = np.array([rng.uniform(-INIT_SPAN, INIT_SPAN) for _ in range(n)], dtype=np.float64)
            tensors.append(Tensor(name, flat.reshape(shape)))
    return Weights(tensors)


def _check_weights(model: TrainerModel, w: Weights) -> list[np.ndarray]:
    expected = model.tensor_shapes()
    if [(t.name, t.shape) for t in w.tensors] != expected:
        raise ValueError(
            f"weights {[(t.name, t.shape) for t in w.tensors]} do not match "
            f"architecture {expected}"
        )
    return [t.array.astype(np.float64, copy=True) for t in w.tensors]


def _matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # [n, d] @ [d, k] accumulated j = 0..d-1: order-pinned, BLAS-free.
    out = np.zeros((x.shape[0], w.shape[1]), dtype=np.float64)
    for j in range(x.shape[1]):
        out += x[:, j : j + 1] * w[j : j + 1, :]
    return out


def _outer_accumulate(x: np.ndarray, d: np.ndarray) -> np.ndarray:
    # x^T @ d for a batch, accumulated row by row in batch order.
    out = np.zeros((x.shape[1], d.shape[1]), dtype=np.float64)
    for i in range(x.shape[0]):
        out += x[i][:, None] * d[i][None, :]
    return out


def _row_sum(d: np.ndarray) -> np.ndarray:
    out = np.zeros(d.shape[1], dtype=np.float64)
    for i in range(d.shape[0]):
        out += d[i]
    return out


def _softmax_and_losses(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row softmax plus per-example cross-entropy, numerically shifted."""
    m = logits[:, 0].copy()
    for c in range(1, logits.shape[1]):
        m = np.maximum(m, logits[:, c])
    shifted = logits - m[:, None]
    e = np.exp(shifted)
    denom = e[:, 0].copy()
    for c in range(1, e.shape[1]):
        denom += e[:, c]
    probs = e / denom[:, None]
    rows = np.arange(len(labels))
    losses = np.log(denom) - shifted[rows, labels]
    return probs, losses


def _forward(model: TrainerModel, arrays: list[np.ndarray], x: np.ndarray):
    """Returns (logits, hidden activation or None)."""
    if model.hidden_width is None:
        w0, b0 = arrays
        return _matmul(x, w0) + b0, None
    w0, b0, w1, b1 = arrays
    hidden = np.tanh(_matmul(x, w0) + b0)
    return _matmul(hidden, w1) + b1, hidden


def _gradients(
    model: TrainerModel,
    arrays: list[np.ndarray],
    x: np.ndarray,
    labels: np.ndarray,
) -> tuple[list[np.ndarray], float]:
    """Mean-over-batch gradients and mean cross-entropy loss."""
    logits, hidden = _forward(model, arrays, x)
    probs, losses = _softmax_and_losses(logits, labels)
    batch = x.shape[0]
    delta = probs.copy()
    delta[np.arange(batch), labels] -= 1.0
    delta /= batch
    loss = 0.0
    for v in losses.tolist():
        loss += v
    loss /= batch
    if model.hidden_width is None:
        grads = [_outer_accumulate(x, delta), _row_sum(delta)]
    else:
        w0, b0, w1, b1 = arrays
        g_w1 = _outer_accumulate(hidden, delta)
        g_b1 = _row_sum(delta)
        d_hidden = np.zeros_like(hidden)
        for c in range(delta.shape[1]):
            d_hidden += delta[:, c : c + 1] * w1[:, c][None, :]
        d_pre = d_hidden * (1.0 - hidden * hidden)
        grads = [_outer_accumulate(x, d_pre), _row_sum(d_pre), g_w1, g_b1]
    return grads, loss


def _proximal_half_sq(arrays: list[np.ndarray], ref: list[np.ndarray]) -> float:
    total = 0.0
    for a, r in zip(arrays, ref):
        diff = (a - r).ravel()
        total += float(np.dot(diff, diff))
    return 0.5 * total


def sgd_fit(
    model: TrainerModel,
    start: Weights,
    data,
    epochs: int,
    lr: float,
    mu: float = 0.0,
    global_ref: Weights | None = None,
    batch_size: int = DEFAULT_BATCH_SIZE,
    seed: int = 0,
) -> tuple[Weights, float]:
    """Minibatch SGD; returns new weights and final-epoch mean train loss.

    The reported loss includes the proximal penalty when mu > 0 and is
    the example-weighted mean over the final epoch's batches, measured
    before each batch's update (the usual running training loss).
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    arrays = _check_weights(model, start)
    ref = _check_weights(model, global_ref) if mu > 0.0 and global_ref is not None else None
    if mu > 0.0 and ref is None:
        ref = [a.copy() for a in arrays]
    x = np.asarray(data.features, dtype=np.float64)
    labels = np.asarray(data.labels, dtype=np.int64)
    n = x.shape[0]
    if x.shape[1] != model.num_features:
        raise ValueError(f"data has {x.shape[1]} features, model expects {model.num_features}")
    rng = Xoshiro256(seed)
    final_epoch_loss = 0.0
    for epoch in range(epochs):
        order = list(range(n))
        rng.shuffle(order)
        epoch_loss_weighted = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            xb = x[idx]
            yb = labels[idx]
            grads, loss = _gradients(model, arrays, xb, yb)
            if mu > 0.0:
                loss += mu * _proximal_half_sq(arrays, ref)
                for g, a, r in zip(grads, arrays, ref):
                    g += mu * (a - r)
            for a, g in zip(arrays, grads):
                a -= lr * g
            epoch_loss_weighted += loss * len(idx)
        final_epoch_loss = epoch_loss_weighted / n
    return start.replace_arrays(arrays), final_epoch_loss


def evaluate_model(model: TrainerModel, weights: Weights, data) -> tuple[float, float, int]:
    """Mean cross-entropy, top-1 accuracy and example count. Pure."""
    arrays = _check_weights(model, weights)
    x = np.asarray(data.features, dtype=np.float64)
    labels = np.asarray(data.labels, dtype=np.int64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("cannot evaluate on empty data")
    logits, _ = _forward(model, arrays, x)
    _, losses = _softmax_and_losses(logits, labels)
    total = 0.0
    for v in losses.tolist():
        total += v
    predictions = np.argmax(logits, axis=1)  # first max wins ties
    correct = int(np.sum(predictions == labels))
    return total / n, correct / n, n


def loss_is_sane(loss: float) -> bool:
    return math.isfinite(loss) and loss >= 0.0
