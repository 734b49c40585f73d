"""Datasets: IDX digit files, synthetic Gaussian blobs, seeded splits."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numcore import Prng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (N, d) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2:
            raise DatasetError(f"inputs must be (N, d), got shape {inputs.shape}")
        if labels.shape != (inputs.shape[0],):
            raise DatasetError(f"{labels.shape[0]} labels for {inputs.shape[0]} inputs")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        if inputs.size and (inputs.min() < 0.0 or inputs.max() > 1.0):
            raise DatasetError("input components must lie in [0, 1]")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dimension(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[indices], self.labels[indices], self.num_classes)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 2
    samples_per_class: int = 100
    dimension: int = 2
    center_separation: float = 0.8
    noise_sigma: float = 0.05

    def __post_init__(self):
        if self.center_separation <= 0:
            raise DatasetError("center_separation must be > 0")
        if self.noise_sigma < 0:
            raise DatasetError("noise_sigma must be >= 0")
        if self.num_classes < 1 or self.samples_per_class < 1:
            raise DatasetError("need at least one class and one sample per class")
        if self.dimension < self.num_classes:
            raise DatasetError("dimension must be >= num_classes (one axis per class center)")


def _read(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx_images(raw: bytes) -> np.ndarray:
    """Parse an IDX3 ubyte image blob into an (N, rows*cols) array in [0, 1]."""
    if len(raw) < 4:
        raise IdxTruncatedError("image file shorter than its magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != IMAGES_MAGIC:
        raise IdxMagicError(f"image magic 0x{magic:08X}, expected 0x{IMAGES_MAGIC:08X}")
    if len(raw) < 16:
        raise IdxTruncatedError("image header truncated")
    count, rows, cols = struct.unpack(">III", raw[4:16])
    need = count * rows * cols
    if len(raw) - 16 < need:
        raise IdxTruncatedError(f"image payload has {len(raw) - 16} bytes, header promises {need}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=need, offset=16)
    return pixels.reshape(count, rows * cols).astype(np.float64) / 255.0


def parse_idx_labels(raw: bytes) -> np.ndarray:
    if len(raw) < 4:
        raise IdxTruncatedError("label file shorter than its magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != LABELS_MAGIC:
        raise IdxMagicError(f"label magic 0x{magic:08X}, expected 0x{LABELS_MAGIC:08X}")
    if len(raw) < 8:
        raise IdxTruncatedError("label header truncated")
    (count,) = struct.unpack(">I", raw[4:8])
    if len(raw) - 8 < count:
        raise IdxTruncatedError(f"label payload has {len(raw) - 8} bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def parse_idx(image_bytes: bytes, label_bytes: bytes, num_classes: int = 10) -> Dataset:
    images = parse_idx_images(image_bytes)
    labels = parse_idx_labels(label_bytes)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= num_classes:
        raise IdxError(f"label {labels.max()} exceeds num_classes={num_classes}")
    return Dataset(images, labels, num_classes)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Load an IDX image/label file pair (optionally gzipped)."""
    return parse_idx(_read(images_path), _read(labels_path), num_classes)


def encode_idx_images(images_u8: np.ndarray) -> bytes:
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    count, rows, cols = images_u8.shape
    return struct.pack(">IIII", IMAGES_MAGIC, count, rows, cols) + images_u8.tobytes()


def encode_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", LABELS_MAGIC, labels.shape[0]) + labels.tobytes()


def write_idx(images_u8: np.ndarray, labels, images_path, labels_path) -> None:
    """Write (N, rows, cols) uint8 images and their labels as an IDX pair.
    Paths ending in ``.gz`` are gzipped."""
    for path, blob in ((images_path, encode_idx_images(images_u8)),
                       (labels_path, encode_idx_labels(labels))):
        if str(path).endswith(".gz"):
            blob = gzip.compress(blob, mtime=0)
        Path(path).write_bytes(blob)


def synth_blobs(spec: SyntheticSpec, seed: int) -> Dataset:
    """Class ``c`` is centred at ``separation * e_c`` with isotropic noise,
    clipped to the unit box. Samples are emitted class by class."""
    rng = Prng(seed)
    n = spec.num_classes * spec.samples_per_class
    inputs = np.zeros((n, spec.dimension))
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    for i, c in enumerate(labels):
        noise = np.array([rng.normal() for _ in range(spec.dimension)])
        inputs[i] = noise * spec.noise_sigma
        inputs[i, c] += spec.center_separation
    return Dataset(np.clip(inputs, 0.0, 1.0), labels, spec.num_classes)


def permutation(n: int, rng: Prng) -> np.ndarray:
    """Fisher-Yates shuffle of ``range(n)`` driven by ``rng``."""
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = rng.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def split(dataset: Dataset, fractions, seed: int) -> list[Dataset]:
    """Shuffle once, then cut consecutive parts of ``floor(f * N)`` items.

    The last part absorbs rounding leftovers when the fractions sum to 1.
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(f <= 0 for f in fractions) or sum(fractions) > 1.0 + 1e-12:
        raise DatasetError(f"fractions must be positive and sum to <= 1, got {fractions}")
    n = len(dataset)
    perm = permutation(n, Prng(seed))
    sizes = [int(np.floor(f * n + 1e-9)) for f in fractions]
    if abs(sum(fractions) - 1.0) <= 1e-12:
        sizes[-1] = n - sum(sizes[:-1])
    parts, start = [], 0
    for size in sizes:
        parts.append(dataset.subset(perm[start:start + size]))
        start += size
    return parts
