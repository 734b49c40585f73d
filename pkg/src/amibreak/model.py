"""Dense ReLU classifier with forward tracing, input gradients, SGD training
and a little-endian binary checkpoint format.

Single-input paths (``forward``, ``predict``, ``input_gradient``) are what the
detector and the attacks use; the batched helpers exist only for training and
reporting and are never mixed with the single-input path when labels are
compared.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numcore
from .data import permutation
from .numcore import DimensionError, Prng

CHECKPOINT_MAGIC = b"AMIB"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class TrainingError(ValueError):
    pass


@dataclass
class MlpNetwork:
    """``layer_dims = [d_in, h1, ..., hL, C]``; ``weights[i]`` is (out, in)."""

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        dims = [int(d) for d in self.layer_dims]
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise DimensionError(f"bad layer_dims {dims}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise DimensionError("need one weight matrix and one bias per layer")
        self.layer_dims = dims
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise DimensionError(
                    f"layer {i}: weight {w.shape}, bias {b.shape} do not chain with {dims}")
            numcore.check_finite(w, f"layer {i} weights")
            numcore.check_finite(b, f"layer {i} bias")

    @classmethod
    def init(cls, layer_dims, seed: int) -> "MlpNetwork":
        """Glorot-uniform weights and zero biases drawn from ``Prng(seed)``."""
        rng = Prng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            s = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform_array(fan_out * fan_in, -s, s).reshape(fan_out, fan_in))
            biases.append(np.zeros(fan_out))
        return cls(list(layer_dims), weights, biases)

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def hidden_widths(self) -> list[int]:
        return self.layer_dims[1:-1]

    def copy(self) -> "MlpNetwork":
        return MlpNetwork(list(self.layer_dims),
                          [w.copy() for w in self.weights],
                          [b.copy() for b in self.biases])


@dataclass
class ForwardTrace:
    pre_acts: list[np.ndarray]   # one per layer, the last one equals logits
    post_acts: list[np.ndarray]  # one per hidden layer (post-ReLU)
    logits: np.ndarray = field(default=None)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise TrainingError("learning_rate must be positive (0 allowed as a no-op limit)")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.epochs < 0:
            raise TrainingError("epochs must be >= 0")


def _check_input(net: MlpNetwork, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise DimensionError(f"input shape {x.shape}, network expects ({net.input_dim},)")
    return x


def argmax(v: np.ndarray) -> int:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return int(np.argmax(v))


def forward(net: MlpNetwork, x, hook: Callable[[int, np.ndarray], np.ndarray] | None = None
            ) -> ForwardTrace:
    """Run ``x`` through the network, recording every activation.

    ``hook(layer, post_act)`` may replace a hidden layer's post-ReLU activation
    before the next layer consumes it; the trace records the replaced value.
    """
    h = _check_input(net, x)
    pre_acts, post_acts = [], []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = w @ h + b
        pre_acts.append(z)
        if i < last:
            h = numcore.relu(z)
            if hook is not None:
                h = hook(i, h)
            post_acts.append(h)
    logits = numcore.check_finite(pre_acts[-1], "logits")
    return ForwardTrace(pre_acts, post_acts, logits)


def predict(net: MlpNetwork, x) -> tuple[int, float]:
    """Return ``(argmax label, max softmax probability)``."""
    logits = forward(net, x).logits
    label = argmax(logits)
    return label, float(numcore.softmax(logits)[label])


def backward_to_input(net: MlpNetwork, trace: ForwardTrace, grad_logits: np.ndarray
                      ) -> np.ndarray:
    g = np.asarray(grad_logits, dtype=np.float64)
    last = len(net.weights) - 1
    g = net.weights[last].T @ g
    for i in range(last - 1, -1, -1):
        # same rule as numcore.relu_grad, inlined for the attack's inner loop
        g = net.weights[i].T @ np.where(trace.pre_acts[i] > 0.0, g, 0.0)
    return g


def input_gradient(net: MlpNetwork, x, loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]]
                   ) -> np.ndarray:
    """Gradient of ``loss_fn(logits)`` with respect to the input ``x``.

    ``loss_fn`` returns ``(loss, dloss/dlogits)``.
    """
    trace = forward(net, x)
    _, grad_logits = loss_fn(trace.logits)
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if grad_logits.shape != trace.logits.shape:
        raise DimensionError(f"loss gradient shape {grad_logits.shape} != logits {trace.logits.shape}")
    return numcore.check_finite(backward_to_input(net, trace, grad_logits), "input gradient")


def forward_batch(net: MlpNetwork, X: np.ndarray) -> np.ndarray:
    """Logits for a batch (N, d_in) -> (N, C). Reporting/training only."""
    h = np.asarray(X, dtype=np.float64)
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if i < last:
            h = numcore.relu(h)
    return h


def accuracy(net: MlpNetwork, dataset) -> float:
    if len(dataset) == 0:
        raise TrainingError("accuracy of an empty dataset is undefined")
    hits = sum(predict(net, x)[0] == y for x, y in zip(dataset.inputs, dataset.labels))
    return hits / len(dataset)


def _batch_step(net: MlpNetwork, X: np.ndarray, y: np.ndarray, lr: float) -> float:
    acts, pres = [X], []
    h = X
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        pres.append(z)
        h = numcore.relu(z) if i < last else z
        acts.append(h)
    logp = numcore.log_softmax(pres[-1])
    n = X.shape[0]
    loss = -float(np.mean(logp[np.arange(n), y]))
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    g /= n
    for i in range(last, -1, -1):
        if i < last:
            g = numcore.relu_grad(pres[i], g)
        grad_w = g.T @ acts[i]
        grad_b = g.sum(axis=0)
        g = g @ net.weights[i]
        net.weights[i] -= lr * grad_w
        net.biases[i] -= lr * grad_b
    return loss


def train(net: MlpNetwork, dataset, cfg: TrainConfig) -> tuple[MlpNetwork, list[float]]:
    """Minibatch SGD on softmax cross-entropy. Returns a trained copy and the
    per-epoch mean loss (mean over minibatch losses weighted by batch size)."""
    if len(dataset) == 0:
        raise TrainingError("cannot train on an empty dataset")
    if dataset.labels.max() >= net.num_classes:
        raise TrainingError("dataset labels exceed the network's class count")
    if dataset.dimension != net.input_dim:
        raise DimensionError(f"dataset dimension {dataset.dimension} != network input {net.input_dim}")
    net = net.copy()
    rng = Prng(cfg.seed)
    n = len(dataset)
    history = []
    for _ in range(cfg.epochs):
        order = permutation(n, rng)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            total += _batch_step(net, dataset.inputs[idx], dataset.labels[idx], cfg.learning_rate) * len(idx)
        history.append(total / n)
    for i in range(len(net.weights)):
        numcore.check_finite(net.weights[i], "trained weights")
        numcore.check_finite(net.biases[i], "trained biases")
    return net, history


def checkpoint_bytes(net: MlpNetwork) -> bytes:
    dims = net.layer_dims
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<II", CHECKPOINT_VERSION, len(dims)),
             struct.pack(f"<{len(dims)}I", *dims)]
    for w, b in zip(net.weights, net.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def parse_checkpoint(raw: bytes) -> MlpNetwork:
    if len(raw) < 4:
        raise CheckpointTruncatedError("checkpoint shorter than its magic")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"bad checkpoint magic {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointTruncatedError("checkpoint header truncated")
    version, count = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    offset = 12 + 4 * count
    if len(raw) < offset:
        raise CheckpointTruncatedError("layer_dims truncated")
    dims = list(struct.unpack(f"<{count}I", raw[12:offset]))
    if count < 2 or any(d < 1 for d in dims):
        raise CheckpointError(f"invalid layer_dims {dims}")
    need = offset + 8 * sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
    if len(raw) < need:
        raise CheckpointTruncatedError(f"checkpoint has {len(raw)} bytes, needs {need}")
    if len(raw) > need:
        raise CheckpointError(f"{len(raw) - need} trailing bytes after parameters")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(raw, dtype="<f8", count=fan_in * fan_out, offset=offset)
        offset += 8 * fan_in * fan_out
        b = np.frombuffer(raw, dtype="<f8", count=fan_out, offset=offset)
        offset += 8 * fan_out
        weights.append(w.astype(np.float64).reshape(fan_out, fan_in))
        biases.append(b.astype(np.float64))
    return MlpNetwork(dims, weights, biases)


def save_checkpoint(net: MlpNetwork, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def load_checkpoint(path) -> MlpNetwork:
    return parse_checkpoint(Path(path).read_bytes())
