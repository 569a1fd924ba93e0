"""ReLU MLP embedder trained by plain multi-way classification.

The network maps inputs through ``hidden_widths`` ReLU layers to a linear
classification head. At meta-test time the head is ignored and the output of
the last ReLU is used as the embedding.
"""

from __future__ import annotations

import hashlib
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .datasets import FormatError, MergedTask
from .numerics import InvalidInputError, SeededRng, derive_seed, log_softmax_rows, softmax_rows

HEAD_SOFTMAX = "softmax"
HEAD_ONE_VS_ALL = "one-vs-all"


class DivergedTrainingError(RuntimeError):
    def __init__(self, epoch: int, generation: Optional[int] = None):
        self.epoch = epoch
        self.generation = generation
        where = f"epoch {epoch}" if generation is None else f"generation {generation}, epoch {epoch}"
        super().__init__(f"training diverged (non-finite loss) at {where}")


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_widths: tuple[int, ...] = (128, 64)
    num_train_classes: int = 64

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if not self.hidden_widths:
            raise InvalidInputError("hidden_widths must be non-empty")
        if min(self.hidden_widths) < 1 or self.input_dim < 1 or self.num_train_classes < 1:
            raise InvalidInputError("all layer widths must be >= 1")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.num_train_classes)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epochs: int = 100
    decay_epochs: tuple[int, ...] = (60, 80)
    decay_factor: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if self.learning_rate < 0:
            raise InvalidInputError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise InvalidInputError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise InvalidInputError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidInputError("batch_size must be >= 1 and epochs >= 0")
        d = self.decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])) or (d and self.epochs and d[-1] >= self.epochs):
            raise InvalidInputError("decay_epochs must be strictly increasing and < epochs")

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for e in self.decay_epochs:
            if epoch >= e:
                lr *= self.decay_factor
        return lr


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    final_accuracy: float = float("nan")
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {"epoch_losses": list(self.epoch_losses), "final_accuracy": self.final_accuracy,
                "wall_time": self.wall_time}


@dataclass
class EmbeddingModel:
    """Layer weights are stored as (fan_in, fan_out); the last layer is the head."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: str = HEAD_SOFTMAX

    @property
    def config(self) -> MlpConfig:
        sizes = [w.shape[0] for w in self.weights] + [self.weights[-1].shape[1]]
        return MlpConfig(sizes[0], tuple(sizes[1:-1]), sizes[-1])

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[1]

    def num_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                              self.head)

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def checksum(self) -> str:
        h = hashlib.sha256(self.head.encode())
        for p in self.parameters():
            h.update(np.ascontiguousarray(p, dtype=np.float64).tobytes())
        return h.hexdigest()


def init_model(config: MlpConfig, seed: int) -> EmbeddingModel:
    """He-normal weights, zero biases."""
    rng = SeededRng(seed)
    sizes = config.layer_sizes
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        weights.append(rng.child("layer", i).normal((fan_in, fan_out), np.sqrt(2.0 / fan_in)))
        biases.append(np.zeros(fan_out))
    return EmbeddingModel(weights, biases)


def _check_batch(model: EmbeddingModel, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise InvalidInputError(
            f"batch shape {x.shape} does not match model input_dim {model.input_dim}")
    return x


def forward(model: EmbeddingModel, batch) -> tuple[np.ndarray, list[np.ndarray]]:
    """Return logits and the per-layer inputs needed by :func:`backward`.

    ``cache[i]`` is the input to layer ``i``; for hidden layers it is the
    post-ReLU activation of the layer before, from which the ReLU mask is
    recovered.
    """
    h = _check_batch(model, batch)
    cache = [h]
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        if i == last:
            return z, cache
        h = np.maximum(z, 0.0)
        cache.append(h)
    raise AssertionError("unreachable")


def features(model: EmbeddingModel, batch) -> np.ndarray:
    h = _check_batch(model, batch)
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        h = np.maximum(h @ w + b, 0.0)
    return h


def backward_from_logit_grad(model: EmbeddingModel, cache: list[np.ndarray],
                             dlogits: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Backpropagate d(loss)/d(logits) into per-layer (dW, db) pairs."""
    if len(cache) != len(model.weights) or dlogits.shape != (cache[0].shape[0], model.num_classes):
        raise InvalidInputError("cache does not belong to this model / batch")
    for h, w in zip(cache, model.weights):
        if h.shape[1] != w.shape[0]:
            raise InvalidInputError("stale cache: activation widths do not match the model")
    grads = [None] * len(model.weights)
    delta = dlogits
    for i in range(len(model.weights) - 1, -1, -1):
        h = cache[i]
        grads[i] = (h.T @ delta, delta.sum(axis=0))
        if i:
            delta = (delta @ model.weights[i].T) * (h > 0)
    return grads


def ce_logit_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    b = logits.shape[0]
    logp = log_softmax_rows(logits)
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()
    g = np.exp(logp)
    g[rows, labels] -= 1.0
    return float(loss), g / b


def bce_logit_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """One-vs-all binary cross-entropy, averaged over samples and heads."""
    b, c = logits.shape
    t = np.zeros_like(logits)
    t[np.arange(b), labels] = 1.0
    # log(1 + e^z) - t z, stable for both signs of z
    loss = np.logaddexp(0.0, logits) - t * logits
    sig = 0.5 * (1.0 + np.tanh(0.5 * logits))
    return float(loss.mean()), (sig - t) / (b * c)


def backward(model: EmbeddingModel, cache: list[np.ndarray], logits: np.ndarray,
             labels) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradients of the batch-mean loss (CE, or BCE for one-vs-all heads)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise InvalidInputError("labels do not match the logits batch")
    loss_fn = bce_logit_grad if model.head == HEAD_ONE_VS_ALL else ce_logit_grad
    _, g = loss_fn(logits, labels)
    return backward_from_logit_grad(model, cache, g)


LogitLoss = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


def sgd_train(model: EmbeddingModel, x: np.ndarray, loss_fn: LogitLoss,
              config: TrainConfig, labels: np.ndarray) -> tuple[EmbeddingModel, TrainReport]:
    """Mini-batch SGD with momentum and coupled weight decay.

    ``loss_fn(logits, batch_rows)`` returns the batch-mean loss and its
    gradient with respect to the logits; ``batch_rows`` indexes into ``x``.
    The last incomplete batch is kept.
    """
    start = time.perf_counter()
    model = model.copy()
    params = model.parameters()
    velocity = [np.zeros_like(p) for p in params]
    n = x.shape[0]
    report = TrainReport()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = SeededRng(derive_seed(config.seed, "epoch", epoch)).permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            rows = order[lo:lo + config.batch_size]
            logits, cache = forward(model, x[rows])
            loss, dlogits = loss_fn(logits, rows)
            if not np.isfinite(loss):
                raise DivergedTrainingError(epoch)
            total += loss * rows.size
            grads = backward_from_logit_grad(model, cache, dlogits)
            flat = [g for pair in grads for g in pair]
            for p, v, g in zip(params, velocity, flat):
                v *= config.momentum
                v -= lr * (g + config.weight_decay * p)
                p += v
        epoch_loss = total / n
        if not np.isfinite(epoch_loss) or not all(np.all(np.isfinite(p)) for p in params):
            raise DivergedTrainingError(epoch)
        report.epoch_losses.append(epoch_loss)
    logits, _ = forward(model, x)
    report.final_accuracy = float(np.mean(np.argmax(logits, axis=1) == labels)) if n else float("nan")
    report.wall_time = time.perf_counter() - start
    return model, report


def _check_task(model: EmbeddingModel, task: MergedTask) -> None:
    if model.num_classes != task.num_classes:
        raise InvalidInputError(
            f"model head has {model.num_classes} outputs but the task has {task.num_classes} classes")
    if task.labels.size and (task.labels.min() < 0 or task.labels.max() >= model.num_classes):
        raise InvalidInputError("task labels exceed the head size")


def train_classifier(model: EmbeddingModel, task: MergedTask,
                     config: TrainConfig) -> tuple[EmbeddingModel, TrainReport]:
    _check_task(model, task)
    labels = task.labels
    return sgd_train(model, task.features, lambda z, rows: ce_logit_grad(z, labels[rows]),
                     config, labels)


def train_multitask(config: MlpConfig, task: MergedTask, train_config: TrainConfig,
                    seed: int = 0) -> tuple[EmbeddingModel, TrainReport]:
    """Shared trunk with one independent sigmoid head per training class."""
    model = init_model(config, seed)
    model.head = HEAD_ONE_VS_ALL
    _check_task(model, task)
    labels = task.labels
    return sgd_train(model, task.features, lambda z, rows: bce_logit_grad(z, labels[rows]),
                     train_config, labels)


# --------------------------------------------------------------------------
# FSM1 checkpoint: magic, u32 version, u32 layer count, then per layer
# [u32 rows, u32 cols, rows*cols f32 weights, cols f32 biases]; the last
# layer is the head. version 1 marks a softmax head, version 2 one-vs-all.

_HEAD_VERSION = {HEAD_SOFTMAX: 1, HEAD_ONE_VS_ALL: 2}


def save_model(model: EmbeddingModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", b"FSM1", _HEAD_VERSION[model.head], len(model.weights)))
        for w, b in zip(model.weights, model.biases):
            fh.write(struct.pack("<II", *w.shape))
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_model(path) -> EmbeddingModel:
    data = Path(path).read_bytes()
    if data[:4] != b"FSM1":
        raise FormatError("bad magic, expected FSM1", 0)
    if len(data) < 12:
        raise FormatError("truncated header", len(data))
    _, version, layers = struct.unpack_from("<4sII", data)
    heads = {v: k for k, v in _HEAD_VERSION.items()}
    if version not in heads:
        raise FormatError(f"unsupported version {version}", 4)
    if layers < 2:
        raise FormatError(f"checkpoint needs at least 2 layers, declares {layers}", 8)
    off = 12
    weights, biases = [], []
    for _ in range(layers):
        if len(data) < off + 8:
            raise FormatError("truncated layer header", off)
        rows, cols = struct.unpack_from("<II", data, off)
        if weights and rows != weights[-1].shape[1]:
            raise FormatError(f"layer input width {rows} does not chain", off)
        need = 4 * (rows * cols + cols)
        if len(data) < off + 8 + need:
            raise FormatError("truncated layer payload", off + 8)
        w = np.frombuffer(data, "<f4", rows * cols, off + 8).astype(np.float64).reshape(rows, cols)
        b = np.frombuffer(data, "<f4", cols, off + 8 + 4 * rows * cols).astype(np.float64)
        weights.append(w)
        biases.append(b)
        off += 8 + need
    if off != len(data):
        raise FormatError("trailing bytes after last layer", off)
    return EmbeddingModel(weights, biases, heads[version])
