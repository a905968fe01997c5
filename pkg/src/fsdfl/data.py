"""Synthetic datasets, non-IID partitions and the shared unlabeled probe set."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    pass


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray   # (N, input_dim)
    labels: np.ndarray   # (N,) int
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "inputs", np.asarray(self.inputs, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if len(self.inputs) != len(self.labels):
            raise DataError("inputs and labels must have equal length")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise DataError("labels out of range")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class SharedSet:
    """Unlabeled probe inputs with stable per-sample identifiers."""

    inputs: np.ndarray
    ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "inputs", np.asarray(self.inputs, dtype=np.float64))
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if len(set(self.ids)) != len(self.ids):
            raise DataError("shared-set ids must be unique")
        if len(self.ids) != len(self.inputs):
            raise DataError("one id per input required")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class Partition:
    assignment: tuple[tuple[int, ...], ...]   # device -> sample indices

    def __post_init__(self):
        norm = tuple(tuple(int(k) for k in idx) for idx in self.assignment)
        object.__setattr__(self, "assignment", norm)
        seen: set[int] = set()
        for dev, idx in enumerate(norm):
            if not idx:
                raise PartitionError(f"device {dev} received no samples")
            s = set(idx)
            if len(s) != len(idx) or s & seen:
                raise PartitionError("sample indices must be disjoint")
            seen |= s

    @property
    def n_devices(self) -> int:
        return len(self.assignment)

    def to_json(self) -> str:
        return json.dumps({"assignment": [list(a) for a in self.assignment]})

    @classmethod
    def from_json(cls, text: str) -> "Partition":
        obj = json.loads(text)
        return cls(assignment=tuple(tuple(a) for a in obj["assignment"]))


@dataclass(frozen=True)
class SyntheticSplits:
    """Train/test splits plus a disjoint pool that shared sets are drawn from."""

    train: Dataset
    test: Dataset
    pool: Dataset


def make_synthetic(num_classes: int, per_class: int, input_dim: int, seed: int,
                   separation: float = 4.0, test_per_class: int = 50,
                   pool_per_class: int = 50) -> SyntheticSplits:
    """Gaussian-blob classes: unit-variance clouds around well-separated means."""
    if num_classes < 2 or per_class < 1:
        raise DataError("need num_classes >= 2 and per_class >= 1")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, input_dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)

    def draw(count_per_class: int) -> Dataset:
        xs, ys = [], []
        for c in range(num_classes):
            xs.append(means[c] + rng.normal(size=(count_per_class, input_dim)))
            ys.append(np.full(count_per_class, c))
        return Dataset(inputs=np.concatenate(xs), labels=np.concatenate(ys),
                       num_classes=num_classes)

    return SyntheticSplits(train=draw(per_class), test=draw(test_per_class),
                           pool=draw(pool_per_class))


def partition_k_class(d: Dataset, n_devices: int, classes_per_device: int,
                      seed: int) -> Partition:
    """Each device holds samples from exactly `classes_per_device` classes."""
    K = d.num_classes
    if n_devices * classes_per_device < K:
        raise PartitionError(
            f"{n_devices} devices x {classes_per_device} classes cannot cover K={K}")
    holders: list[list[int]] = [[] for _ in range(K)]
    for dev in range(n_devices):
        for m in range(classes_per_device):
            c = (dev * classes_per_device + m) % K
            if dev not in holders[c]:
                holders[c].append(dev)
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(n_devices)]
    for c in range(K):
        idx = np.flatnonzero(d.labels == c)
        if len(idx) < len(holders[c]):
            raise PartitionError(f"class {c} has too few samples to split")
        idx = rng.permutation(idx)
        for dev, chunk in zip(holders[c], np.array_split(idx, len(holders[c]))):
            buckets[dev].extend(int(k) for k in chunk)
    return Partition(assignment=tuple(tuple(b) for b in buckets))


def partition_dirichlet(d: Dataset, n_devices: int, alpha: float,
                        seed: int, max_tries: int = 100) -> Partition:
    """Per-class device shares drawn from Dirichlet(alpha)."""
    if alpha <= 0:
        raise PartitionError("alpha must be positive")
    K = d.num_classes
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        buckets: list[list[int]] = [[] for _ in range(n_devices)]
        for c in range(K):
            idx = rng.permutation(np.flatnonzero(d.labels == c))
            shares = rng.dirichlet(np.full(n_devices, alpha))
            counts = rng.multinomial(len(idx), shares)
            off = 0
            for dev, cnt in enumerate(counts):
                buckets[dev].extend(int(k) for k in idx[off:off + cnt])
                off += cnt
        if all(buckets):
            return Partition(assignment=tuple(tuple(b) for b in buckets))
    raise PartitionError(
        f"could not produce nonempty devices in {max_tries} tries (alpha={alpha})")


def sample_shared(pool: Dataset, count: int, mode: str = "iid",
                  seed: int = 0, alpha: float = 10.0) -> SharedSet:
    """Draw the unlabeled shared set from a pool; labels are dropped.

    mode="dirichlet" skews the label composition with Dirichlet(alpha)
    before the labels are discarded.
    """
    if count > len(pool):
        raise DataError(f"count={count} exceeds pool size {len(pool)}")
    if count < 1:
        raise DataError("count must be positive")
    rng = np.random.default_rng(seed)
    if mode == "iid":
        chosen = rng.choice(len(pool), size=count, replace=False)
    elif mode == "dirichlet":
        K = pool.num_classes
        weights = rng.dirichlet(np.full(K, alpha))
        per_class = [np.flatnonzero(pool.labels == c) for c in range(K)]
        counts = rng.multinomial(count, weights)
        # clip to availability, topping up shortfalls uniformly
        counts = np.minimum(counts, [len(p) for p in per_class])
        chosen_parts = [rng.choice(per_class[c], size=counts[c], replace=False)
                        for c in range(K)]
        chosen = np.concatenate(chosen_parts) if chosen_parts else np.array([], int)
        remaining = np.setdiff1d(np.arange(len(pool)), chosen)
        short = count - len(chosen)
        if short > 0:
            chosen = np.concatenate([chosen, rng.choice(remaining, size=short,
                                                        replace=False)])
    else:
        raise DataError(f"unknown shared-set mode {mode!r}")
    chosen = rng.permutation(chosen)
    return SharedSet(inputs=pool.inputs[chosen], ids=tuple(int(i) for i in chosen))


def label_kl_from_uniform(p: Partition, d: Dataset) -> np.ndarray:
    """KL(empirical label distribution || uniform) per device, 0 log 0 := 0."""
    K = d.num_classes
    out = np.zeros(p.n_devices)
    for dev, idx in enumerate(p.assignment):
        hist = np.bincount(d.labels[list(idx)], minlength=K).astype(float)
        q = hist / hist.sum()
        nz = q > 0
        out[dev] = float(np.sum(q[nz] * np.log(q[nz] * K)))
    return out


def label_histogram(p: Partition, d: Dataset) -> np.ndarray:
    K = d.num_classes
    return np.stack([np.bincount(d.labels[list(idx)], minlength=K)
                     for idx in p.assignment])


def load_idx_images(path) -> np.ndarray:
    """IDX image file (big-endian header) flattened to (N, rows*cols) floats."""
    with open(path, "rb") as f:
        magic, n, rows, cols = struct.unpack(">IIII", f.read(16))
        if magic != 0x00000803:
            raise DataError(f"bad IDX image magic 0x{magic:08x}")
        raw = np.frombuffer(f.read(n * rows * cols), dtype=np.uint8)
    return raw.reshape(n, rows * cols).astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, n = struct.unpack(">II", f.read(8))
        if magic != 0x00000801:
            raise DataError(f"bad IDX label magic 0x{magic:08x}")
        raw = np.frombuffer(f.read(n), dtype=np.uint8)
    return raw.astype(np.int64)


def load_mnist(images_path, labels_path, num_classes: int = 10,
               limit: int | None = None) -> Dataset:
    X = load_idx_images(images_path)
    y = load_idx_labels(labels_path)
    if limit is not None:
        X, y = X[:limit], y[:limit]
    return Dataset(inputs=X, labels=y, num_classes=num_classes)
