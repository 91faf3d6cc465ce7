"""Synthetic datasets and non-IID Dirichlet partitioning.

Two desk-scale dataset families: Gaussian blobs on a scaled coordinate
grid (vector inputs) and noisy geometric patterns (image inputs). The
partitioner splits each class across domains with proportions drawn from
a symmetric Dirichlet; small concentrations produce heavily skewed,
nearly single-class domains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import serialization as ser


class PartitionError(RuntimeError):
    """Could not satisfy the per-domain minimum size within the retry budget."""


@dataclass
class Dataset:
    inputs: np.ndarray  # float32 [N, ...]
    labels: np.ndarray  # int64 [N]
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"inputs ({len(self.inputs)}) and labels ({len(self.labels)}) differ in length")
        if len(self.labels) == 0:
            raise ValueError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices, split=None):
        return Dataset(
            self.inputs[indices],
            self.labels[indices],
            self.class_count,
            split if split is not None else self.split,
        )

    def class_histogram(self):
        return np.bincount(self.labels, minlength=self.class_count)


@dataclass
class PartitionPlan:
    domains: int
    alpha: float
    seed: int
    assignment: np.ndarray  # int64 [N], domain id per sample
    histograms: np.ndarray = field(default=None)  # [K, C] class counts

    def domain_indices(self, k):
        return np.flatnonzero(self.assignment == k)

    def to_json_dict(self):
        return {
            "domains": self.domains,
            "alpha": self.alpha,
            "seed": self.seed,
            "histograms": self.histograms.tolist(),
            "sizes": [int(n) for n in np.bincount(self.assignment, minlength=self.domains)],
        }


def _grid_centers(classes, dim, spacing=2.0):
    """Distinct class means on an integer grid, scaled by `spacing`."""
    base = 2
    while base ** dim < classes:
        base += 1
    centers = np.zeros((classes, dim))
    for c in range(classes):
        v, rem = [], c
        for _ in range(dim):
            v.append(rem % base)
            rem //= base
        centers[c] = np.array(v, dtype=float) * spacing
    return centers


def make_blobs(classes, dim, n_per_class, spread, seed, test_per_class=None):
    """Gaussian clusters with grid-spaced means; returns (train, test).

    The test split is drawn from the same clusters with an independent
    stream of the same seed.
    """
    if classes < 2 or dim < 2:
        raise ValueError("make_blobs requires classes >= 2 and dim >= 2")
    if n_per_class < 2:
        raise ValueError("make_blobs requires n_per_class >= 2")
    if test_per_class is None:
        test_per_class = max(2, n_per_class // 4)
    centers = _grid_centers(classes, dim)

    def draw(count, stream):
        rng = np.random.Generator(np.random.Philox(key=[seed, stream]))
        xs, ys = [], []
        for c in range(classes):
            xs.append(centers[c] + spread * rng.standard_normal((count, dim)))
            ys.append(np.full(count, c, dtype=np.int64))
        return np.concatenate(xs).astype(np.float32), np.concatenate(ys)

    xt, yt = draw(n_per_class, 0)
    xv, yv = draw(test_per_class, 1)
    return (
        Dataset(xt, yt, classes, "train"),
        Dataset(xv, yv, classes, "test"),
    )


def _pattern_template(c, channels, h, w):
    kind = c % 3
    scalepat = np.zeros((h, w))
    if kind == 0:  # vertical bars, period grows with class
        period = 2 + c // 3
        cols = (np.arange(w) // period) % 2
        scalepat[:] = np.where(cols == 0, 1.0, -1.0)
    elif kind == 1:  # checkerboard
        cell = 2 + c // 3
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        scalepat = np.where(((ii // cell) + (jj // cell)) % 2 == 0, 1.0, -1.0)
    else:  # off-centre blob
        ci, cj = h // 3 + (c // 3) % (h // 3), w // 3 + (c // 3) % (w // 3)
        ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        r2 = (ii - ci) ** 2 + (jj - cj) ** 2
        scalepat = 2.0 * np.exp(-r2 / (2.0 * (h / 4) ** 2)) - 1.0
    template = np.stack([np.roll(scalepat, shift=ch, axis=1) for ch in range(channels)])
    return template


def make_patterns(classes, channels, h, w, n_per_class, noise, seed, test_per_class=None):
    """Class-specific geometric templates plus Gaussian noise; (train, test)."""
    if h < 8 or w < 8:
        raise ValueError("make_patterns requires H, W >= 8")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    if n_per_class < 2:
        raise ValueError("make_patterns requires n_per_class >= 2")
    if test_per_class is None:
        test_per_class = max(2, n_per_class // 4)
    templates = np.stack([_pattern_template(c, channels, h, w) for c in range(classes)])

    def draw(count, stream):
        rng = np.random.Generator(np.random.Philox(key=[seed, stream]))
        xs, ys = [], []
        for c in range(classes):
            xs.append(templates[c] + noise * rng.standard_normal((count, channels, h, w)))
            ys.append(np.full(count, c, dtype=np.int64))
        return np.concatenate(xs).astype(np.float32), np.concatenate(ys)

    xt, yt = draw(n_per_class, 0)
    xv, yv = draw(test_per_class, 1)
    return (
        Dataset(xt, yt, classes, "train"),
        Dataset(xv, yv, classes, "test"),
    )


def pattern_templates(classes, channels, h, w):
    """The noise-free class templates (nearest-template oracle support)."""
    return np.stack([_pattern_template(c, channels, h, w) for c in range(classes)])


def dirichlet_partition(ds, domains, alpha, seed, min_size, max_retries=100):
    """Split every class across domains with Dirichlet(alpha) proportions.

    Redraws (bounded) until each domain holds at least `min_size` samples.
    """
    if domains < 2:
        raise ValueError("need at least 2 domains")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    n = len(ds)
    for attempt in range(max_retries):
        rng = np.random.Generator(np.random.Philox(key=[seed, attempt]))
        assignment = np.full(n, -1, dtype=np.int64)
        for c in range(ds.class_count):
            idx = np.flatnonzero(ds.labels == c)
            if idx.size == 0:
                continue
            rng.shuffle(idx)
            proportions = rng.dirichlet(np.full(domains, alpha))
            cuts = (np.cumsum(proportions)[:-1] * idx.size).astype(int)
            for k, part in enumerate(np.split(idx, cuts)):
                assignment[part] = k
        sizes = np.bincount(assignment, minlength=domains)
        if sizes.min() >= min_size:
            hist = np.zeros((domains, ds.class_count), dtype=np.int64)
            for k in range(domains):
                hist[k] = np.bincount(ds.labels[assignment == k], minlength=ds.class_count)
            return PartitionPlan(domains, alpha, seed, assignment, hist)
    raise PartitionError(
        f"could not reach min_size={min_size} per domain after {max_retries} draws "
        f"(K={domains}, alpha={alpha}, N={n})"
    )


def split_by_plan(ds, plan):
    """Materialize per-domain datasets from a partition plan."""
    return [ds.subset(plan.domain_indices(k)) for k in range(plan.domains)]


# ---------------------------------------------------------------------------
# DMMD files
# ---------------------------------------------------------------------------


def save_dataset(ds, path, extra_meta=None):
    header = {
        "kind": "dataset",
        "class_count": ds.class_count,
        "split": ds.split,
        "meta": extra_meta or {},
    }
    arrays = {"inputs": ds.inputs, "labels": ds.labels.astype(np.float32)}
    ser.write_container(path, ser.DATASET_MAGIC, header, arrays)


def load_dataset(path):
    header, arrays = ser.read_container(path, ser.DATASET_MAGIC)
    ds = Dataset(
        arrays["inputs"],
        arrays["labels"].astype(np.int64),
        int(header["class_count"]),
        header.get("split", "train"),
    )
    return ds, header.get("meta", {})
