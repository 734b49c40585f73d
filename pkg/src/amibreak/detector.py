"""Activation-amplification detector.

Per class, the ``k_top`` hidden neurons with the highest mean post-ReLU
activation over that class's examples are deemed important. The augmented
network is the same network with, after every hidden ReLU, the important
neurons (for the class the original network predicts) multiplied by
``alpha`` and all other neurons by ``beta``. An input is rejected when the
original and augmented networks disagree on the argmax.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import MlpNetwork, argmax, forward

ACCEPTED = "accepted"
REJECTED = "rejected"

ALPHA_GRID = tuple(round(1.0 + 0.1 * i, 10) for i in range(21))
BETA_GRID = tuple(round(1.0 - 0.1 * i, 10) for i in range(6))
K_GRID = (1, 2, 4, 8, 16)


class CalibrationError(ValueError):
    def __init__(self, message, closest_fpr=None, closest_config=None):
        super().__init__(message)
        self.closest_fpr = closest_fpr
        self.closest_config = closest_config


class ProfileMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    k_top: int = 0
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.k_top < 0:
            raise ValueError("k_top must be >= 0")
        if not self.alpha >= 1.0:
            raise ValueError("alpha must be >= 1")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")

    @property
    def is_identity(self) -> bool:
        return self.alpha == 1.0 and self.beta == 1.0


@dataclass(frozen=True)
class ImportanceProfile:
    """``indices[c][l]`` holds the important neurons of hidden layer ``l`` for
    class ``c``. ``means[l]`` (classes x width) keeps the per-class mean
    activations so the profile can be re-cut at a different ``k_top``."""

    indices: tuple
    k_top: int
    widths: tuple
    means: tuple = None
    source_size: int = 0

    def __post_init__(self):
        for c, layers in enumerate(self.indices):
            if len(layers) != len(self.widths):
                raise ProfileMismatchError(f"class {c}: {len(layers)} layers, expected {len(self.widths)}")
            for l, (idx, width) in enumerate(zip(layers, self.widths)):
                if len(idx) != min(self.k_top, width):
                    raise ProfileMismatchError(
                        f"class {c} layer {l}: {len(idx)} indices, expected {min(self.k_top, width)}")
                if len(set(idx)) != len(idx) or any(not 0 <= i < width for i in idx):
                    raise ProfileMismatchError(f"class {c} layer {l}: invalid indices {idx}")

    @property
    def num_classes(self) -> int:
        return len(self.indices)

    def with_k(self, k_top: int) -> "ImportanceProfile":
        if self.means is None:
            raise ProfileMismatchError("profile carries no mean activations to re-rank")
        return _profile_from_means(self.means, k_top, self.source_size)

    def check_network(self, net: MlpNetwork) -> None:
        if tuple(net.hidden_widths) != tuple(self.widths) or net.num_classes != self.num_classes:
            raise ProfileMismatchError(
                f"profile built for widths {list(self.widths)} / {self.num_classes} classes, "
                f"network has {net.hidden_widths} / {net.num_classes}")

    def to_json(self, config: DetectorConfig | None = None) -> dict:
        config = config or DetectorConfig(k_top=self.k_top)
        classes = []
        for c, layers in enumerate(self.indices):
            entries = []
            for l, idx in enumerate(layers):
                entry = {"layer": l, "indices": [int(i) for i in idx]}
                if self.means is not None:
                    entry["mean_activation"] = [float(v) for v in self.means[l][c]]
                entries.append(entry)
            classes.append({"class": c, "layers": entries})
        return {"classes": classes, "k_top": self.k_top, "alpha": config.alpha,
                "beta": config.beta, "widths": list(self.widths), "source_size": self.source_size}

    @classmethod
    def from_json(cls, doc: dict) -> tuple["ImportanceProfile", DetectorConfig]:
        classes = sorted(doc["classes"], key=lambda e: e["class"])
        indices = tuple(tuple(tuple(layer["indices"]) for layer in sorted(e["layers"], key=lambda d: d["layer"]))
                        for e in classes)
        widths = tuple(doc.get("widths") or ())
        means = None
        if classes and all("mean_activation" in layer for e in classes for layer in e["layers"]):
            n_layers = len(classes[0]["layers"])
            means = tuple(
                np.array([sorted(e["layers"], key=lambda d: d["layer"])[l]["mean_activation"] for e in classes])
                for l in range(n_layers))
            widths = widths or tuple(m.shape[1] for m in means)
        profile = cls(indices, int(doc["k_top"]), widths, means, int(doc.get("source_size", 0)))
        config = DetectorConfig(int(doc["k_top"]), float(doc["alpha"]), float(doc["beta"]))
        return profile, config


@dataclass(frozen=True)
class Verdict:
    status: str
    original_label: int
    augmented_label: int

    @property
    def accepted(self) -> bool:
        return self.status == ACCEPTED


@dataclass(frozen=True)
class Detector:
    """A network bundled with its importance profile and amplification config."""

    net: MlpNetwork
    profile: ImportanceProfile
    config: DetectorConfig

    def __post_init__(self):
        self.profile.check_network(self.net)

    def detect(self, x) -> Verdict:
        return detect(self.net, self.profile, self.config, x)


def top_k(values: np.ndarray, k: int) -> tuple:
    """Indices of the ``k`` largest values; ties go to the lower index."""
    order = np.argsort(-np.asarray(values), kind="stable")
    return tuple(int(i) for i in order[:k])


def _profile_from_means(means, k_top, source_size) -> ImportanceProfile:
    widths = tuple(m.shape[1] for m in means)
    num_classes = means[0].shape[0]
    indices = tuple(
        tuple(top_k(means[l][c], min(k_top, widths[l])) for l in range(len(means)))
        for c in range(num_classes))
    return ImportanceProfile(indices, k_top, widths, tuple(means), source_size)


def extract_importance(net: MlpNetwork, dataset, k_top: int) -> ImportanceProfile:
    """Top-``k_top`` neurons by mean post-ReLU activation, per class and layer.

    Means are exactly rounded (``math.fsum``) so the result does not depend
    on dataset order.
    """
    if k_top < 0:
        raise ValueError("k_top must be >= 0")
    if len(dataset) == 0:
        raise CalibrationError("importance extraction needs a nonempty dataset")
    if not net.hidden_widths:
        raise ProfileMismatchError("network has no hidden layers to profile")
    acts = [[] for _ in net.hidden_widths]
    for x in dataset.inputs:
        trace = forward(net, x)
        for l, h in enumerate(trace.post_acts):
            acts[l].append(h)
    acts = [np.stack(a) for a in acts]
    means = []
    for l, a in enumerate(acts):
        m = np.zeros((net.num_classes, a.shape[1]))
        for c in range(net.num_classes):
            rows = a[dataset.labels == c]
            if rows.shape[0] == 0:
                raise CalibrationError(f"class {c} has no examples to extract importance from")
            m[c] = [math.fsum(col) / rows.shape[0] for col in rows.T]
        means.append(m)
    return _profile_from_means(means, k_top, len(dataset))


def _scales(profile: ImportanceProfile, cfg: DetectorConfig, cls: int) -> list[np.ndarray]:
    scales = []
    for width, idx in zip(profile.widths, profile.indices[cls]):
        s = np.full(width, cfg.beta)
        s[list(idx)] = cfg.alpha
        scales.append(s)
    return scales


def augmented_forward(net: MlpNetwork, profile: ImportanceProfile, cfg: DetectorConfig, x,
                      original_label: int | None = None) -> tuple[np.ndarray, int]:
    """Logits and label of the augmented network on ``x``.

    The neuron sets are those of the class the original network predicts;
    pass ``original_label`` to skip recomputing it.
    """
    profile.check_network(net)
    if original_label is None:
        original_label = argmax(forward(net, x).logits)
    scales = _scales(profile, cfg, original_label)
    logits = forward(net, x, hook=lambda l, h: h * scales[l]).logits
    return logits, argmax(logits)


def detect(net: MlpNetwork, profile: ImportanceProfile, cfg: DetectorConfig, x) -> Verdict:
    original = argmax(forward(net, x).logits)
    _, augmented = augmented_forward(net, profile, cfg, x, original_label=original)
    status = ACCEPTED if original == augmented else REJECTED
    return Verdict(status, original, augmented)


def correctly_classified(net: MlpNetwork, dataset):
    keep = [i for i, (x, y) in enumerate(zip(dataset.inputs, dataset.labels))
            if argmax(forward(net, x).logits) == y]
    return dataset.subset(keep)


def measure_fpr(net: MlpNetwork, profile: ImportanceProfile, cfg: DetectorConfig, clean_set) -> float:
    """Rejected fraction of the correctly classified inputs in ``clean_set``."""
    clean = correctly_classified(net, clean_set)
    if len(clean) == 0:
        raise CalibrationError("no correctly classified clean inputs to measure FPR on")
    rejected = sum(not detect(net, profile, cfg, x).accepted for x in clean.inputs)
    return rejected / len(clean)


def calibration_grid(widths=None):
    """The fixed search order: alpha outermost, then beta, then k_top."""
    for alpha in ALPHA_GRID:
        for beta in BETA_GRID:
            for k in K_GRID:
                if widths:
                    k = min(k, max(widths))
                yield DetectorConfig(k_top=k, alpha=alpha, beta=beta)


def calibration_table(net: MlpNetwork, profile: ImportanceProfile, clean_set,
                      grid=None) -> list[tuple[DetectorConfig, float]]:
    """Measured FPR at every grid point, in grid order."""
    profile.check_network(net)
    grid = list(grid if grid is not None else calibration_grid(profile.widths))
    clean = correctly_classified(net, clean_set)
    if len(clean) == 0:
        raise CalibrationError("no correctly classified clean inputs to calibrate on")
    labels = [argmax(forward(net, x).logits) for x in clean.inputs]
    profiles = {}
    table = []
    for cfg in grid:
        if cfg.k_top not in profiles:
            profiles[cfg.k_top] = profile.with_k(cfg.k_top)
        prof = profiles[cfg.k_top]
        rejected = 0
        for x, y in zip(clean.inputs, labels):
            _, aug = augmented_forward(net, prof, cfg, x, original_label=y)
            rejected += aug != y
        table.append((cfg, rejected / len(clean)))
    return table


def calibrate(net: MlpNetwork, profile: ImportanceProfile, clean_validation_set,
              target_fpr: float, tolerance: float = 0.02, grid=None) -> DetectorConfig:
    """Pick the grid point with the largest FPR inside
    ``[target_fpr - tolerance, target_fpr + tolerance]``; the first such point
    in grid order wins ties. ``profile`` must carry mean activations so it can
    be re-cut for each ``k_top``.
    """
    if not 0.0 <= target_fpr < 1.0:
        raise ValueError("target_fpr must lie in [0, 1)")
    table = calibration_table(net, profile, clean_validation_set, grid)
    return select_config(table, target_fpr, tolerance)


def select_config(table, target_fpr: float, tolerance: float = 0.02) -> DetectorConfig:
    best = None
    for cfg, fpr in table:
        if target_fpr - tolerance <= fpr <= target_fpr + tolerance:
            if best is None or fpr > best[1]:
                best = (cfg, fpr)
    if best is None:
        cfg, fpr = min(table, key=lambda row: abs(row[1] - target_fpr))
        raise CalibrationError(
            f"no grid point within {tolerance} of target FPR {target_fpr}; closest is {fpr:.4f}",
            closest_fpr=fpr, closest_config=cfg)
    return best[0]


def save_profile(profile: ImportanceProfile, config: DetectorConfig, path) -> None:
    Path(path).write_text(json.dumps(profile.to_json(config), indent=1) + "\n", encoding="utf-8")


def load_profile(path) -> tuple[ImportanceProfile, DetectorConfig]:
    return ImportanceProfile.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
