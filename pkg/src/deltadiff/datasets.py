"""Desk-scale dataset generation and ingestion.

Synthetic Gaussian-blob classification, nonlinear tabular regression,
RFC-4180-subset CSV tables and IDX-format digit images. Loaders return
raw features; standardization statistics are computed on the training
split only (see `split`).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .rng import RngStream


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    task: str  # "classification" | "regression"
    inputs: np.ndarray  # (n, d) float64
    targets: np.ndarray  # (n,) int64 labels or (n, k) float64 values
    n_classes: int = 0
    feature_mean: np.ndarray | None = None  # stats used to standardize inputs
    feature_std: np.ndarray | None = None

    def __post_init__(self):
        # Empty datasets only arise as degenerate split slices.
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be an (n, d) array")
        if len(self.targets) != len(self.inputs):
            raise ValueError("inputs/targets length mismatch")
        if self.feature_mean is None:
            self.feature_mean = np.zeros(self.inputs.shape[1])
        if self.feature_std is None:
            self.feature_std = np.ones(self.inputs.shape[1])

    def __len__(self):
        return len(self.inputs)

    @property
    def n_features(self) -> int:
        return self.inputs.shape[1]

    @property
    def target_dim(self) -> int:
        return self.n_classes if self.task == "classification" else self.targets.shape[1]

    def take(self, idx: np.ndarray) -> "Dataset":
        return replace(self, inputs=self.inputs[idx], targets=self.targets[idx])


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.15
    test: float = 0.15
    seed: int = 0

    def __post_init__(self):
        total = self.train + self.val + self.test
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"split fractions sum to {total}, expected 1")
        if min(self.train, self.val, self.test) < 0:
            raise ValueError("split fractions must be non-negative")


def gen_blobs(seed: int, n: int, C: int = 4, spread: float = 1.5,
              d: int = 2, center_radius: float = 3.0) -> Dataset:
    """Gaussian-mixture classification: C centers on a circle, isotropic noise.

    Class counts are balanced within +-1 of n/C. spread=0 collapses each
    class onto its center, making the task perfectly separable.
    """
    if C < 2 or n < C:
        raise ValueError("need n >= C >= 2")
    rng = RngStream(seed, 0).child("blobs")
    angles = 2.0 * np.pi * np.arange(C) / C
    centers = np.zeros((C, d))
    centers[:, 0] = center_radius * np.cos(angles)
    if d > 1:
        centers[:, 1] = center_radius * np.sin(angles)
    labels = np.arange(n) % C  # round-robin keeps counts within +-1
    labels = labels[rng.permutation(n)]
    inputs = centers[labels] + spread * rng.gaussian((n, d))
    return Dataset("classification", inputs, labels.astype(np.int64), n_classes=C)


def gen_tabular_reg(seed: int, n: int, d: int = 8, noise_std: float = 0.1,
                    n_terms: int = 3) -> Dataset:
    """Nonlinear regression: y = sum_k sin(w_k . x) + eps, x ~ N(0, I)."""
    if n < 1 or d < 1:
        raise ValueError("need n, d >= 1")
    rng = RngStream(seed, 0).child("tabular")
    W = tabular_reg_directions(seed, d, n_terms)
    x = rng.gaussian((n, d))
    y = np.sin(x @ W.T).sum(axis=1) + noise_std * rng.gaussian(n)
    return Dataset("regression", x, y[:, None])


def tabular_reg_directions(seed: int, d: int, n_terms: int = 3) -> np.ndarray:
    """The (n_terms, d) frequency matrix used by gen_tabular_reg for `seed`."""
    wrng = RngStream(seed, 0).child("tabular-directions")
    return wrng.gaussian((n_terms, d)) / np.sqrt(d)


def load_csv_table(path, target_column: str) -> Dataset:
    """All-numeric CSV with a header row; the named column becomes the target."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if target_column not in header:
            raise DataFormatError(f"{path}: no column named {target_column!r}")
        t_idx = header.index(target_column)
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{line_no}: {exc}") from None
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=np.float64)
    x = np.delete(data, t_idx, axis=1)
    y = data[:, t_idx]
    return Dataset("regression", x, y[:, None])


_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801


def load_idx(path_images, path_labels, limit: int = 2000) -> Dataset:
    """Standard big-endian IDX image/label pair, pixels scaled to [0, 1]."""
    if limit <= 0:
        raise ValueError("limit must be positive")
    img_bytes = Path(path_images).read_bytes()
    lab_bytes = Path(path_labels).read_bytes()
    if len(img_bytes) < 16 or len(lab_bytes) < 8:
        raise DataFormatError("IDX file too short for its header")
    magic, n_img, rows, cols = struct.unpack(">IIII", img_bytes[:16])
    if magic != _IDX_IMAGE_MAGIC:
        raise DataFormatError(f"bad image magic 0x{magic:08x}")
    lmagic, n_lab = struct.unpack(">II", lab_bytes[:8])
    if lmagic != _IDX_LABEL_MAGIC:
        raise DataFormatError(f"bad label magic 0x{lmagic:08x}")
    if n_img != n_lab:
        raise DataFormatError(f"image/label count mismatch: {n_img} vs {n_lab}")
    need = 16 + n_img * rows * cols
    if len(img_bytes) < need:
        raise DataFormatError("image payload shorter than header promises")
    n = min(n_img, limit)
    pixels = np.frombuffer(img_bytes, dtype=np.uint8, count=n * rows * cols, offset=16)
    x = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab_bytes, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    classes = int(labels.max()) + 1 if n else 0
    return Dataset("classification", x, labels, n_classes=max(classes, 2))


def standardize_stats(inputs: np.ndarray) -> tuple:
    """Per-column mean/std; constant columns keep std 1 to stay divisible."""
    mean = inputs.mean(axis=0)
    std = inputs.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    return mean, std


def split(dataset: Dataset, spec: SplitSpec) -> tuple:
    """Shuffle, slice into train/val/test and standardize by train statistics."""
    n = len(dataset)
    perm = RngStream(spec.seed, 0).child("split").permutation(n)
    n_train = int(round(spec.train * n))
    n_val = int(round(spec.val * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    mean, std = standardize_stats(dataset.inputs[parts[0]]) if n_train else (None, None)
    out = []
    for idx in parts:
        sub = dataset.take(idx) if len(idx) else replace(
            dataset, inputs=dataset.inputs[:0], targets=dataset.targets[:0])
        if n_train:
            sub = replace(sub, inputs=(sub.inputs - mean) / std,
                          feature_mean=mean, feature_std=std)
        out.append(sub)
    return tuple(out)
