"""Targeted L-inf PGD on a confidence-margin loss, and the detector-oblivious
random-target retry loop built on it."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .detector import Detector, Verdict
from .model import MlpNetwork, argmax, forward
from .numcore import DomainError, Prng


class AttackInputError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    step_size: float = 0.01
    iterations: int = 200
    kappa: float = 0.0
    random_init: bool = True
    max_attempts: int = 200
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.kappa >= 0:
            raise ValueError("kappa must be >= 0")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass
class AttackOutcome:
    x_adv: np.ndarray
    achieved_margin: float
    succeeded: bool
    iterations_used: int
    target: int = -1


@dataclass
class ObliviousResult:
    x_adv: np.ndarray
    target: int
    attempts: int
    final_verdict: Verdict
    succeeded: bool
    outcome: AttackOutcome = field(default=None, repr=False)
    original_hits: int = 0  # attempts that fooled the original network
    rejections: int = 0  # of those, how many the detector rejected


def margin_loss(logits, target: int, kappa: float = 0.0) -> float:
    """``max(max_{i != t} z_i - z_t, -kappa)``: at most ``-kappa`` once the
    target logit leads every other logit by ``kappa``."""
    return margin_loss_and_grad(logits, target, kappa)[0]


def margin_loss_and_grad(logits, target: int, kappa: float = 0.0) -> tuple[float, np.ndarray]:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] < 2:
        raise DomainError("margin loss needs at least two classes")
    if not 0 <= target < z.shape[0]:
        raise DomainError(f"target {target} out of range for {z.shape[0]} classes")
    others = z.copy()
    others[target] = -np.inf
    runner_up = int(np.argmax(others))
    gap = float(z[runner_up] - z[target])
    grad = np.zeros_like(z)
    if gap <= -kappa:
        return -float(kappa), grad
    grad[runner_up] = 1.0
    grad[target] = -1.0
    return gap, grad


def feasible_box(x: np.ndarray, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Bounds ``lo <= x_adv <= hi`` of ``B_inf(x, epsilon)`` intersected with
    ``[0, 1]^d``, tightened so that ``abs(v - x) <= epsilon`` holds in float64
    for every ``v`` between them (``x +/- epsilon`` itself may round outward).
    """
    lo = np.maximum(x - epsilon, 0.0)
    hi = np.minimum(x + epsilon, 1.0)
    # float subtraction is monotone, so fixing the two endpoints fixes the interval
    while True:
        bad = (x - lo) > epsilon
        if not bad.any():
            break
        lo = np.where(bad, np.nextafter(lo, np.inf), lo)
    while True:
        bad = (hi - x) > epsilon
        if not bad.any():
            break
        hi = np.where(bad, np.nextafter(hi, -np.inf), hi)
    return lo, hi


def project(x_adv: np.ndarray, x: np.ndarray, epsilon: float) -> np.ndarray:
    """Project onto ``B_inf(x, epsilon)`` intersected with ``[0, 1]^d``, exactly."""
    lo, hi = feasible_box(x, epsilon)
    return np.clip(x_adv, lo, hi)


def _check_x(net: MlpNetwork, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise AttackInputError(f"input shape {x.shape}, network expects ({net.input_dim},)")
    if x.min() < 0.0 or x.max() > 1.0:
        raise AttackInputError("input must lie in [0, 1]")
    return x


def pgd_targeted(net: MlpNetwork, x, target: int, cfg: AttackConfig, rng: Prng | None = None,
                 record: list | None = None) -> AttackOutcome:
    """Signed-gradient descent on :func:`margin_loss` against ``net`` alone.

    Stops as soon as the target leads by ``kappa``. ``rng`` supplies the
    random start (defaults to ``Prng(cfg.seed)``); ``record``, if given,
    receives a copy of every projected iterate.
    """
    x = _check_x(net, x)
    if not 0 <= target < net.num_classes:
        raise AttackInputError(f"target {target} out of range for {net.num_classes} classes")
    lo, hi = feasible_box(x, cfg.epsilon)
    x_adv = x.copy()
    if cfg.random_init and cfg.epsilon > 0:
        rng = rng if rng is not None else Prng(cfg.seed)
        x_adv = np.clip(x + rng.uniform_array(x.size, -cfg.epsilon, cfg.epsilon), lo, hi)
    if record is not None:
        record.append(x_adv.copy())
    used = 0
    for _ in range(cfg.iterations):
        grad = _margin_step_direction(net, x_adv, target, cfg.kappa)
        if grad is None:
            break
        x_adv = np.clip(x_adv - cfg.step_size * np.sign(grad), lo, hi)
        used += 1
        if record is not None:
            record.append(x_adv.copy())
    margin = margin_loss(forward(net, x_adv).logits, target, cfg.kappa)
    return AttackOutcome(x_adv, margin, margin <= -cfg.kappa, used, target)


def _margin_step_direction(net: MlpNetwork, x: np.ndarray, target: int, kappa: float) -> np.ndarray | None:
    """Input gradient of :func:`margin_loss`, or None once the loss is at its
    floor ``-kappa``. Same math as ``model.input_gradient`` with the margin
    loss, fused because it is the attack's inner loop: the logit gradient is
    ``e_r - e_t``, so the last layer's backward pass is a row difference."""
    weights, biases = net.weights, net.biases
    h, masks = x, []
    for w, b in zip(weights[:-1], biases[:-1]):
        z = w @ h + b
        masks.append(z > 0.0)
        h = np.maximum(z, 0.0)
    logits = weights[-1] @ h + biases[-1]
    z_t = logits[target]
    logits[target] = -np.inf
    runner_up = int(np.argmax(logits))
    gap = logits[runner_up] - z_t
    if not np.isfinite(gap):
        raise DomainError("non-finite logits during attack")
    if gap <= -kappa:
        return None
    g = weights[-1][runner_up] - weights[-1][target]
    for w, mask in zip(reversed(weights[:-1]), reversed(masks)):
        g = w.T @ np.where(mask, g, 0.0)
    return g


def draw_wrong_label(rng: Prng, num_classes: int, y_true: int) -> int:
    """Uniform over the ``num_classes - 1`` labels other than ``y_true``."""
    t = rng.below(num_classes - 1)
    return t + 1 if t >= y_true else t


def oblivious_attack(net: MlpNetwork, detector: Detector, x, y_true: int, cfg: AttackConfig,
                     on_attempt: Callable[[int, int, list], None] | None = None) -> ObliviousResult:
    """Random-target retry loop.

    Each attempt draws a fresh wrong target and a fresh random start from
    ``Prng(cfg.seed)`` and attacks ``net`` only. The detector is queried
    solely to decide whether to stop: success means both the original and
    the augmented network output the target.

    If every attempt fails, the result carries the attempt with the lowest
    achieved margin and ``succeeded=False``.
    """
    x = _check_x(net, x)
    if net.num_classes < 2:
        raise AttackInputError("need at least two classes")
    if argmax(forward(net, x).logits) != y_true:
        raise AttackInputError("oblivious_attack expects an input the network classifies correctly")
    rng = Prng(cfg.seed)
    best = None
    hits = rejections = 0
    for attempt in range(1, cfg.max_attempts + 1):
        target = draw_wrong_label(rng, net.num_classes, y_true)
        trail = [] if on_attempt is not None else None
        outcome = pgd_targeted(net, x, target, cfg, rng=rng, record=trail)
        if on_attempt is not None:
            on_attempt(attempt, target, trail)
        if outcome.succeeded:
            hits += 1
            verdict = detector.detect(outcome.x_adv)
            rejections += not verdict.accepted
            if verdict.accepted and verdict.original_label == target:
                return ObliviousResult(outcome.x_adv, target, attempt, verdict, True, outcome,
                                       hits, rejections)
        if best is None or outcome.achieved_margin < best.achieved_margin:
            best = outcome
    verdict = detector.detect(best.x_adv)
    return ObliviousResult(best.x_adv, best.target, cfg.max_attempts, verdict, False, best,
                           hits, rejections)


def untargeted_success(verdict: Verdict, y_true: int) -> bool:
    return verdict.accepted and verdict.original_label != y_true
