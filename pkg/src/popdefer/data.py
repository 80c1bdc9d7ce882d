"""Synthetic classification tasks with known posteriors, plus CSV I/O.

Class labels are 0-based and contiguous everywhere in this package; CSV
files may carry arbitrary label values and get remapped on load.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    """A CSV row or column violated the dataset schema."""


class GenerationError(RuntimeError):
    """Blob placement could not satisfy the separation constraint."""


@dataclass
class Dataset:
    """Immutable sample container: features, labels, optional subclasses."""

    x: np.ndarray                       # (n, d)
    y: np.ndarray                       # (n,) int
    subclass: np.ndarray | None = None  # (n,) int
    split: str = "train"
    seed: int | None = None
    num_classes: int | None = None

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.intp)
        if self.subclass is not None:
            self.subclass = np.asarray(self.subclass, dtype=np.intp)
        if self.num_classes is None:
            self.num_classes = int(self.y.max()) + 1 if len(self.y) else 0

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx: np.ndarray, split: str | None = None) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx],
                       None if self.subclass is None else self.subclass[idx],
                       split or self.split, self.seed, self.num_classes)


@dataclass
class GaussianClusterTask:
    """Three (by default) spherical clusters in the plane; one mixes classes."""

    means: np.ndarray = field(
        default_factory=lambda: np.array([[10.0, 10.0], [2.0, 6.0], [6.0, 2.0]]))
    cov_diag: np.ndarray = field(
        default_factory=lambda: np.array([0.2, 0.2]))
    class_dists: np.ndarray = field(
        default_factory=lambda: np.array([[0.5, 0.5], [1.0, 0.0], [0.0, 1.0]]))
    mixing: np.ndarray = field(default_factory=lambda: np.full(3, 1.0 / 3.0))

    def __post_init__(self) -> None:
        self.means = np.asarray(self.means, dtype=np.float64)
        self.cov_diag = np.asarray(self.cov_diag, dtype=np.float64)
        self.class_dists = np.asarray(self.class_dists, dtype=np.float64)
        self.mixing = np.asarray(self.mixing, dtype=np.float64)
        if (self.cov_diag <= 0).any():
            raise ValueError("covariance entries must be positive")
        if not np.allclose(self.class_dists.sum(axis=1), 1.0):
            raise ValueError("per-cluster class distributions must sum to 1")

    @property
    def num_classes(self) -> int:
        return self.class_dists.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> Dataset:
        if n <= 0:
            raise ValueError("n must be positive")
        comp = rng.choice(len(self.mixing), size=n, p=self.mixing)
        x = self.means[comp] + rng.standard_normal((n, 2)) * np.sqrt(self.cov_diag)
        y = np.empty(n, dtype=np.intp)
        for c in range(len(self.mixing)):
            sel = comp == c
            if sel.any():
                y[sel] = rng.choice(self.num_classes, size=int(sel.sum()),
                                    p=self.class_dists[c])
        return Dataset(x, y, subclass=comp, num_classes=self.num_classes)

    def log_component_densities(self, x: np.ndarray) -> np.ndarray:
        """(n, clusters) log N(x; mu_c, diag) for each cluster."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diff = x[:, None, :] - self.means[None, :, :]
        quad = (diff * diff / self.cov_diag).sum(axis=2)
        lognorm = 0.5 * (np.log(2.0 * np.pi * self.cov_diag)).sum()
        return -0.5 * quad - lognorm

    def responsibilities(self, x: np.ndarray) -> np.ndarray:
        logd = self.log_component_densities(x) + np.log(self.mixing)
        logd -= logd.max(axis=1, keepdims=True)
        w = np.exp(logd)
        return w / w.sum(axis=1, keepdims=True)

    def posterior(self, x: np.ndarray) -> np.ndarray:
        """P(y | x) under the generating mixture; rows sum to 1."""
        return self.responsibilities(x) @ self.class_dists


def gen_gaussian_task(n: int, seed: int) -> tuple[GaussianClusterTask, Dataset]:
    task = GaussianClusterTask()
    rng = np.random.default_rng(seed)
    ds = task.sample(n, rng)
    return task, Dataset(ds.x, ds.y, ds.subclass, "train", seed, ds.num_classes)


@dataclass
class HierarchicalBlobTask:
    """K_sup * S Gaussian blobs; labels are superclasses, blobs subclasses."""

    blob_means: np.ndarray   # (K_sup*S, d)
    sigma: float
    superclasses: int
    subclasses_per_super: int

    @property
    def num_classes(self) -> int:
        return self.superclasses

    @property
    def dim(self) -> int:
        return self.blob_means.shape[1]

    def super_of(self, subclass: np.ndarray) -> np.ndarray:
        return np.asarray(subclass) // self.subclasses_per_super

    def sample(self, n: int, rng: np.random.Generator) -> Dataset:
        blobs = self.blob_means.shape[0]
        comp = rng.integers(0, blobs, size=n)
        x = self.blob_means[comp] + rng.standard_normal((n, self.dim)) * self.sigma
        y = self.super_of(comp)
        return Dataset(x, y, subclass=comp, num_classes=self.superclasses)

    def posterior(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diff = x[:, None, :] - self.blob_means[None, :, :]
        logd = -0.5 * (diff * diff).sum(axis=2) / (self.sigma ** 2)
        logd -= logd.max(axis=1, keepdims=True)
        w = np.exp(logd)
        w /= w.sum(axis=1, keepdims=True)
        post = np.zeros((x.shape[0], self.superclasses))
        for s in range(self.superclasses):
            lo = s * self.subclasses_per_super
            post[:, s] = w[:, lo:lo + self.subclasses_per_super].sum(axis=1)
        return post


def gen_hierarchical_blobs(k_sup: int, s: int, d: int, n: int,
                           separation: float, seed: int,
                           sigma: float = 1.0,
                           max_tries: int = 200
                           ) -> tuple[HierarchicalBlobTask, Dataset]:
    """Place K_sup*S blob means with pairwise distance >= separation*sigma.

    Means are drawn uniformly in a box sized so the packing is comfortable;
    failing placements are resampled, growing the box, before giving up.
    """
    if k_sup <= 0 or s <= 0 or d <= 0 or n <= 0:
        raise ValueError("counts must be positive")
    rng = np.random.default_rng(seed)
    blobs = k_sup * s
    min_dist = separation * sigma
    width = min_dist * max(2.0, blobs ** (1.0 / d)) * 1.5
    for attempt in range(max_tries):
        means = rng.uniform(0.0, width, size=(blobs, d))
        dist = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=2)
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= min_dist:
            task = HierarchicalBlobTask(means, sigma, k_sup, s)
            return task, task.sample(n, rng)
        width *= 1.1
    raise GenerationError(
        f"could not place {blobs} blobs at separation {separation} "
        f"within {max_tries} attempts")


def split_dataset(dataset: Dataset, fractions: tuple[float, float, float],
                  seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffled disjoint train/valid/test partition."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ValueError("need exactly three fractions")
    if any(f < 0.0 or f > 1.0 for f in fractions):
        raise ValueError("fractions must lie in [0, 1]")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(fractions[0] * n))
    n_valid = int(np.floor(fractions[1] * n))
    train = dataset.subset(order[:n_train], "train")
    valid = dataset.subset(order[n_train:n_train + n_valid], "valid")
    test = dataset.subset(order[n_train + n_valid:], "test")
    return train, valid, test


def save_csv(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    d = dataset.dim
    header = [f"feature_{i}" for i in range(d)] + ["label"]
    if dataset.subclass is not None:
        header.append("subclass")
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(dataset)):
            row = [repr(float(v)) for v in dataset.x[i]] + [int(dataset.y[i])]
            if dataset.subclass is not None:
                row.append(int(dataset.subclass[i]))
            writer.writerow(row)


def load_csv(path: str | Path) -> Dataset:
    """Read the feature_*/label(/subclass) schema; labels are remapped to a
    contiguous 0-based range (original order preserved by sorted value)."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, header row required")
        feat_cols = [c for c in header if c.startswith("feature_")]
        expected = [f"feature_{i}" for i in range(len(feat_cols))]
        if feat_cols != expected:
            raise ParseError(f"{path}: feature columns must be "
                             f"feature_0..feature_{{d-1}} in order")
        if "label" not in header:
            raise ParseError(f"{path}: missing required column 'label'")
        label_idx = header.index("label")
        sub_idx = header.index("subclass") if "subclass" in header else None
        xs, labels, subs = [], [], []
        for rownum, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"{path}: row {rownum} has {len(row)} cells, "
                                 f"expected {len(header)}")
            feats = []
            for j, _ in enumerate(feat_cols):
                try:
                    feats.append(float(row[j]))
                except ValueError:
                    raise ParseError(
                        f"{path}: row {rownum}, column feature_{j}: "
                        f"non-numeric value {row[j]!r}")
            xs.append(feats)
            labels.append(row[label_idx])
            if sub_idx is not None:
                try:
                    subs.append(int(row[sub_idx]))
                except ValueError:
                    raise ParseError(f"{path}: row {rownum}, column subclass: "
                                     f"non-integer value {row[sub_idx]!r}")
    if not xs:
        raise ParseError(f"{path}: no data rows")
    uniq = sorted(set(labels), key=lambda v: (len(v), v))
    mapping = {v: i for i, v in enumerate(uniq)}
    y = np.array([mapping[v] for v in labels], dtype=np.intp)
    return Dataset(np.array(xs), y,
                   np.array(subs, dtype=np.intp) if sub_idx is not None else None,
                   num_classes=len(uniq))
