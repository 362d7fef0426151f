"""Labeled datasets, forget/retain splits, and the dataset CSV format.

Datasets are immutable after construction (arrays are write-locked) and every
generator is a pure function of its arguments including the seed, so splits
and synthetic data reproduce exactly across runs.

Each dataset carries an access counter incremented by :meth:`LabeledDataset.batch`,
the single choke point through which training code consumes samples. The
benchmark harness snapshots this counter around each unlearning run to audit
that no method other than the retrained oracle ever reads the retention set.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Xoshiro256

CLASS_MEAN_RADIUS = 2.0


class ParseError(ValueError):
    """A dataset file row could not be parsed; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class LabelRangeError(ValueError):
    """A label lies outside [0, class_count)."""


@dataclass
class LabeledDataset:
    """N samples of width d_in with integer class labels in [0, class_count)."""

    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"
    access_count: int = field(default=0, compare=False)

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError("inputs must be a nonempty matrix")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("labels must be one vector entry per sample")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise LabelRangeError(
                f"labels must lie in [0, {self.class_count})"
            )
        if not np.isfinite(self.inputs).all():
            raise ValueError("inputs must be finite")
        self.inputs.flags.writeable = False
        self.labels.flags.writeable = False

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d_in(self) -> int:
        return self.inputs.shape[1]

    def batch(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (inputs, labels) for training, counting the access."""
        self.access_count += 1
        return self.inputs, self.labels

    def peek(self) -> tuple[np.ndarray, np.ndarray]:
        """Uncounted view, for evaluation and diagnostics."""
        return self.inputs, self.labels

    def subset(self, indices, name: str) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.class_count, name)

    def class_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


@dataclass
class ForgetSplit:
    """A partition of a source dataset into forget and retain subsets."""

    forget: LabeledDataset
    retain: LabeledDataset
    seed: int
    forget_indices: tuple[int, ...]
    retain_indices: tuple[int, ...]
    forgotten_classes: tuple[int, ...] | None = None

    def __post_init__(self):
        overlap = set(self.forget_indices) & set(self.retain_indices)
        if overlap:
            raise ValueError(f"forget and retain overlap at indices {sorted(overlap)}")


def gen_gaussian_clusters(
    b: int, n_per_class: int, d_in: int, spread: float, seed: int, name: str = "synthetic"
) -> LabeledDataset:
    """Seeded Gaussian clusters, one per class, linearly separable at small spread.

    Class means are independently drawn Gaussian directions normalized to the
    unit sphere and scaled by a fixed radius of 2.0, so a pretrained model can
    reach near-perfect accuracy and the unlearning benchmark starts from a
    clean slate. ``spread`` is the per-coordinate noise scale (zero collapses
    every sample onto its class mean).
    """
    if b < 2:
        raise ValueError("b must be at least 2")
    if n_per_class < 1:
        raise ValueError("n_per_class must be positive")
    if d_in < 2:
        raise ValueError("d_in must be at least 2")
    if spread < 0:
        raise ValueError("spread must be nonnegative")
    rng = Xoshiro256(seed)
    means = np.zeros((b, d_in))
    for c in range(b):
        v = rng.normals(d_in)
        norm = float(np.linalg.norm(v))
        while norm < 1e-12:
            v = rng.normals(d_in)
            norm = float(np.linalg.norm(v))
        means[c] = v / norm * CLASS_MEAN_RADIUS
    inputs = np.zeros((b * n_per_class, d_in))
    labels = np.zeros(b * n_per_class, dtype=np.int64)
    row = 0
    for c in range(b):
        for _ in range(n_per_class):
            noise = rng.normals(d_in)
            inputs[row] = means[c] + spread * noise
            labels[row] = c
            row += 1
    return LabeledDataset(inputs, labels, b, name)


def split_forget(data: LabeledDataset, k: int, seed: int) -> ForgetSplit:
    """Uniformly sample k forget indices without replacement; the rest retain."""
    if k < 1 or k >= data.n:
        raise ValueError(f"k must satisfy 1 <= k < {data.n}, got {k}")
    rng = Xoshiro256(seed)
    picked = rng.sample_indices(data.n, k)
    forget_idx = tuple(sorted(picked))
    retain_idx = tuple(sorted(set(range(data.n)) - set(picked)))
    return ForgetSplit(
        forget=data.subset(forget_idx, f"{data.name}:forget"),
        retain=data.subset(retain_idx, f"{data.name}:retain"),
        seed=seed,
        forget_indices=forget_idx,
        retain_indices=retain_idx,
    )


def split_forget_classes(
    data: LabeledDataset, class_fraction: float, seed: int
) -> ForgetSplit:
    """Forget every sample of ceil(class_fraction * b) uniformly chosen classes."""
    b = data.class_count
    m = math.ceil(class_fraction * b)
    if m < 1 or m >= b:
        raise ValueError(
            f"class_fraction {class_fraction} selects {m} of {b} classes; "
            "must select at least 1 and fewer than all"
        )
    rng = Xoshiro256(seed)
    chosen = tuple(sorted(rng.sample_indices(b, m)))
    mask = np.isin(data.labels, chosen)
    forget_idx = tuple(int(i) for i in np.nonzero(mask)[0])
    retain_idx = tuple(int(i) for i in np.nonzero(~mask)[0])
    if not retain_idx:
        raise ValueError("class split left the retain set empty")
    return ForgetSplit(
        forget=data.subset(forget_idx, f"{data.name}:forget"),
        retain=data.subset(retain_idx, f"{data.name}:retain"),
        seed=seed,
        forget_indices=forget_idx,
        retain_indices=retain_idx,
        forgotten_classes=chosen,
    )


_HEADER_RE = re.compile(r"^#\s*n=(\d+)\s+d=(\d+)\s+b=(\d+)\s*$")


def save_dataset_csv(data: LabeledDataset, path) -> None:
    path = Path(path)
    lines = [f"# n={data.n} d={data.d_in} b={data.class_count}"]
    for label, row in zip(data.labels, data.inputs):
        lines.append(str(int(label)) + "," + ",".join(repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n")


def load_dataset_csv(path) -> LabeledDataset:
    path = Path(path)
    raw = path.read_text().splitlines()
    if not raw:
        raise ParseError(1, "empty file")
    m = _HEADER_RE.match(raw[0])
    if not m:
        raise ParseError(1, "expected header '# n=<N> d=<d> b=<b>'")
    n, d, b = (int(g) for g in m.groups())
    inputs = np.zeros((n, d))
    labels = np.zeros(n, dtype=np.int64)
    row = 0
    for lineno, line in enumerate(raw[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != d + 1:
            raise ParseError(lineno, f"expected {d + 1} fields, got {len(parts)}")
        try:
            label = int(parts[0])
            values = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from exc
        if label < 0 or label >= b:
            raise LabelRangeError(f"line {lineno}: label {label} outside [0, {b})")
        if row >= n:
            raise ParseError(lineno, f"more than the declared {n} rows")
        inputs[row] = values
        labels[row] = label
        row += 1
    if row != n:
        raise ParseError(len(raw), f"expected {n} rows, found {row}")
    return LabeledDataset(inputs, labels, b, path.stem)
