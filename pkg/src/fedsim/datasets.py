"""Synthetic datasets and client partitioning.

Generation draws k Gaussian blobs (unit variance, means scaled so the
closest pair of class means sits exactly class_separation apart) with
balanced labels. Partitioning splits a dataset across C clients without
overlap: an iid_fraction share of each client's examples comes from the
globally shuffled pool, the rest from a single dominant class assigned
round-robin (client i gets class i mod k).

Dataset generation is a data-prep concern, not part of the reproducible
training path, so it uses numpy's own generator; sampling and training
use the package's portable PRNG instead.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PartitionError(ValueError):
    pass


@dataclass
class LocalDataset:
    """Feature matrix [n x d] (F64) with integer class labels in [0, k)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if len(self.labels) != len(self.features):
            raise ValueError("features/labels length mismatch")
        if len(self.features) < 1:
            raise ValueError("dataset needs at least one example")

    def __len__(self) -> int:
        return len(self.features)

    def subset(self, indices) -> "LocalDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LocalDataset(self.features[idx], self.labels[idx])


@dataclass(frozen=True)
class SyntheticSpec:
    """task_seed fixes the class means so several specs (train, test,
    holdout) can sample the same classification task; None reuses seed,
    which then defines both the task and the draws."""

    num_examples: int
    num_features: int
    num_classes: int
    class_separation: float
    seed: int
    task_seed: int | None = None

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_examples < self.num_classes:
            raise ValueError("need at least one example per class")
        if self.class_separation <= 0:
            raise ValueError("class_separation must be > 0")


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    iid_fraction: float
    seed: int

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not 0.0 <= self.iid_fraction <= 1.0:
            raise ValueError("iid_fraction must be in [0, 1]")


def make_synthetic(spec: SyntheticSpec) -> LocalDataset:
    """Gaussian blobs; deterministic under spec.seed (and task_seed).

    Draw order is fixed (means, then label permutation, then noise) so
    the same spec always yields identical bytes. Means come from the
    task stream; everything after comes from the example stream.
    """
    rng = np.random.default_rng(spec.seed)
    means_rng = rng if spec.task_seed is None else np.random.default_rng(spec.task_seed)
    k, d, n = spec.num_classes, spec.num_features, spec.num_examples
    means = means_rng.standard_normal((k, d))
    # Scale means so the minimum pairwise distance equals the requested
    # separation; unit-variance noise then controls class overlap.
    min_dist = np.inf
    for i in range(k):
        for j in range(i + 1, k):
            min_dist = min(min_dist, float(np.linalg.norm(means[i] - means[j])))
    if min_dist == 0.0:
        # Vanishingly unlikely; nudge apart deterministically.
        means += np.arange(k)[:, None]
        min_dist = 1.0
    means *= spec.class_separation / min_dist
    labels = np.arange(n, dtype=np.int64) % k  # balanced within +-1
    labels = labels[rng.permutation(n)]
    features = means[labels] + rng.standard_normal((n, d))
    return LocalDataset(features, labels)


def partition(data: LocalDataset, spec: PartitionSpec) -> list[LocalDataset]:
    """Disjoint covering split with per-client IID/non-IID mix.

    Client sizes differ by at most one (the first n mod C clients take
    the extra example). For each client, floor(iid_fraction * size)
    examples come from the shuffled global pool and the remainder from
    the client's dominant class; with iid_fraction 0.5 this guarantees
    at least half of every client's examples share one label.
    """
    n = len(data)
    c = spec.num_clients
    if n < c:
        raise PartitionError(f"{n} examples cannot cover {c} clients")
    rng = np.random.default_rng(spec.seed)
    k = int(data.labels.max()) + 1 if len(data.labels) else 0

    sizes = [n // c + (1 if i < n % c else 0) for i in range(c)]

    # Per-class index pools, each shuffled once; a cursor walks each pool.
    pools: list[list[int]] = [np.flatnonzero(data.labels == cls).tolist() for cls in range(k)]
    for pool in pools:
        rng.shuffle(pool)
    cursors = [0] * k

    non_iid_parts: list[list[int]] = []
    for i in range(c):
        iid_count = int(spec.iid_fraction * sizes[i])
        non_iid_count = sizes[i] - iid_count
        dominant = i % k
        available = len(pools[dominant]) - cursors[dominant]
        if available < non_iid_count:
            raise PartitionError(
                f"class {dominant} has {available} unassigned examples, "
                f"client {i} needs {non_iid_count} non-IID"
            )
        start = cursors[dominant]
        non_iid_parts.append(pools[dominant][start : start + non_iid_count])
        cursors[dominant] += non_iid_count

    # Everything unconsumed forms the IID pool, shuffled globally.
    leftover: list[int] = []
    for cls in range(k):
        leftover.extend(pools[cls][cursors[cls] :])
    rng.shuffle(leftover)

    out: list[LocalDataset] = []
    cursor = 0
    for i in range(c):
        iid_count = sizes[i] - len(non_iid_parts[i])
        indices = non_iid_parts[i] + leftover[cursor : cursor + iid_count]
        cursor += iid_count
        out.append(data.subset(indices))
    return out


def save_csv(data: LocalDataset, path: str | Path) -> None:
    """Header row f0..f{d-1},label; floats via repr (round-trip exact)."""
    path = Path(path)
    d = data.features.shape[1]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{j}" for j in range(d)] + ["label"])
        for row, label in zip(data.features, data.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path: str | Path) -> LocalDataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1] != "label":
            raise ValueError(f"{path}: expected a header ending in 'label'")
        features = []
        labels = []
        for row in reader:
            if not row:
                continue
            features.append([float(v) for v in row[:-1]])
            labels.append(int(row[-1]))
    if not features:
        raise ValueError(f"{path}: no data rows")
    return LocalDataset(np.array(features, dtype=np.float64), np.array(labels, dtype=np.int64))
