"""Numeric foundation: float64 tensors, the few differentiable ops the
classifier needs, and a SplitMix64 generator.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every public
op checks its output for NaN/Inf and raises :class:`NonFiniteError` instead
of silently propagating them.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_tensor(values, shape=None) -> np.ndarray:
    """Copy ``values`` into a fresh float64 array, optionally reshaped."""
    out = np.array(values, dtype=np.float64)
    if shape is not None:
        shape = tuple(shape)
        if any(int(s) <= 0 for s in shape):
            raise DimensionError(f"non-positive dimension in {shape}")
        if int(np.prod(shape)) != out.size:
            raise DimensionError(f"{out.size} values cannot fill shape {shape}")
        out = out.reshape(shape)
    return check_finite(out)


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return t


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return check_finite(out, "matmul result")


def relu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0)


def relu_grad(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pass ``upstream`` through where ``x > 0``; the subgradient at 0 is 0."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.shape != upstream.shape:
        raise DimensionError(f"relu_grad shapes disagree: {x.shape} vs {upstream.shape}")
    return np.where(x > 0.0, upstream, 0.0)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_xent(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of ``softmax(logits)`` against ``label``.

    Returns the loss and its gradient with respect to the logits,
    ``softmax(logits) - onehot(label)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise DimensionError(f"expected a logit vector, got shape {logits.shape}")
    if not 0 <= label < logits.shape[0]:
        raise DomainError(f"label {label} out of range for {logits.shape[0]} classes")
    logp = log_softmax(logits)
    # -0.0 shows up when the label logit dominates completely
    loss = max(-float(logp[label]), 0.0)
    grad = np.exp(logp)
    grad[label] -= 1.0
    return loss, check_finite(grad, "softmax_xent gradient")


def splitmix64_mix(z: int) -> int:
    """The SplitMix64 output function applied to a raw 64-bit state."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    """Independent per-item seed: one SplitMix64 step from ``seed ^ index``."""
    return Prng((seed ^ index) & MASK64).next()


class Prng:
    """SplitMix64. The whole state is the single 64-bit counter ``state``."""

    __slots__ = ("state",)

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def __repr__(self):
        return f"Prng(state=0x{self.state:016X})"

    def next(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return splitmix64_mix(self.state)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        # top 53 bits -> [0, 1)
        u = (self.next() >> 11) * (1.0 / (1 << 53))
        return lo + (hi - lo) * u

    def below(self, n: int) -> int:
        """Unbiased integer in ``[0, n)`` by rejection from the raw stream."""
        if n < 1:
            raise DomainError(f"below() needs n >= 1, got {n}")
        if n == 1:
            self.next()
            return 0
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next()
            if r < limit:
                return r % n

    def normal(self) -> float:
        # Box-Muller, cosine branch only, so each call consumes exactly two draws
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return float(np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2))

    def raw_array(self, n: int) -> np.ndarray:
        """The next ``n`` raw outputs, identical to ``n`` calls of :meth:`next`."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return z

    def uniform_array(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        u = (self.raw_array(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return lo + (hi - lo) * u


def prng_next(p: Prng) -> int:
    return p.next()


def prng_uniform(p: Prng, lo: float, hi: float) -> float:
    return p.uniform(lo, hi)


def prng_below(p: Prng, n: int) -> int:
    return p.below(n)
