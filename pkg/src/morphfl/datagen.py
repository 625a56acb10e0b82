"""Synthetic non-IID classification data and heterogeneous client populations."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class DataConfig:
    num_clients: int = 40
    n_classes: int = 5
    feature_dim: int = 32
    samples_per_client: tuple = (60, 140)
    dirichlet_h: float = 0.5
    blob_spread: float = 1.0
    class_separation: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.dirichlet_h <= 0:
            raise ValueError("dirichlet_h must be positive")
        lo, hi = self.samples_per_client
        if not 10 <= lo <= hi:
            raise ValueError("samples_per_client must satisfy 10 <= lo <= hi")


@dataclass
class CapacityConfig:
    cap_min: float
    cap_max: float
    speed_min: float = 2e4
    speed_max: float = 2e5

    def __post_init__(self):
        if self.cap_min <= 0 or self.cap_max < self.cap_min:
            raise ValueError("need 0 < cap_min <= cap_max")
        if self.speed_min <= 0 or self.speed_max < self.speed_min:
            raise ValueError("need 0 < speed_min <= speed_max")


def generate_dataset(config: DataConfig, n_samples: int = None):
    """Gaussian blobs, one per class, with balanced class counts.

    Class means are ``class_separation * N(0, I)``; samples add
    ``blob_spread * N(0, I)`` noise. Returns ``(X, y)``.
    """
    rng = np.random.default_rng([config.seed, 101])
    if n_samples is None:
        lo, hi = config.samples_per_client
        n_samples = config.num_clients * (lo + hi) // 2
    C, d = config.n_classes, config.feature_dim
    means = config.class_separation * rng.standard_normal((C, d))
    y = np.arange(n_samples) % C
    rng.shuffle(y)
    X = means[y] + config.blob_spread * rng.standard_normal((n_samples, d))
    return X, y


def _round_to_total(weights, total: int) -> np.ndarray:
    """Largest-remainder rounding of ``total * weights / sum(weights)``."""
    w = np.asarray(weights, dtype=np.float64)
    raw = total * w / w.sum()
    out = np.floor(raw).astype(np.int64)
    rem = total - out.sum()
    if rem > 0:
        order = np.argsort(-(raw - out), kind="stable")
        out[order[:rem]] += 1
    return out


def partition_dirichlet(dataset, m: int, h: float, rng, samples_per_client=None, test_fraction: float = 0.2):
    """Split ``dataset`` over ``m`` clients with Dirichlet(h) label skew.

    Each client draws its label proportions from ``Dirichlet(h * 1_C)``; the
    whole dataset is handed out, without replacement. When a class runs dry
    the shortfall is filled from the classes that still have samples.
    Returns, per client, ``(train_idx, test_idx)`` index arrays.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    X, y = dataset
    n = len(y)
    if n < 10 * m:
        raise ValueError(f"{n} samples cannot give {m} clients 10 samples each")
    classes = np.unique(y)
    C = len(classes)
    pools = [list(rng.permutation(np.flatnonzero(y == c))) for c in classes]

    if samples_per_client is None:
        raw = np.ones(m)
    else:
        lo, hi = samples_per_client
        raw = rng.uniform(lo, hi, size=m)
    sizes = _round_to_total(raw, n)
    short = sizes < 10
    if short.any():
        sizes = _round_to_total(np.ones(m), n)

    parts = []
    for k in range(m):
        props = rng.dirichlet(np.full(C, h))
        want = _round_to_total(props, int(sizes[k]))
        have = np.array([len(p) for p in pools])
        take = np.minimum(want, have)
        missing = int(sizes[k] - take.sum())
        while missing > 0:
            spare = have - take
            extra = _round_to_total(spare, min(missing, int(spare.sum())))
            extra = np.minimum(extra, spare)
            if extra.sum() == 0:
                extra[np.argmax(spare)] = 1
            take += extra
            missing = int(sizes[k] - take.sum())
        idx = []
        for c in range(C):
            idx.extend(pools[c][: take[c]])
            del pools[c][: take[c]]
        idx = rng.permutation(np.array(idx, dtype=np.int64))
        n_test = int(round(test_fraction * len(idx)))
        parts.append((np.sort(idx[n_test:]), np.sort(idx[:n_test])))
    return parts


def sample_capacities(config: CapacityConfig, m: int, rng) -> list:
    """Log-uniform ``(capacity, speed)`` pairs.

    The first client gets ``cap_min`` and, when ``m >= 2``, the second gets
    ``cap_max`` so both extremes are always present.
    """
    caps = np.exp(rng.uniform(np.log(config.cap_min), np.log(config.cap_max), size=m))
    speeds = np.exp(rng.uniform(np.log(config.speed_min), np.log(config.speed_max), size=m))
    if m >= 1:
        caps[0] = config.cap_min
    if m >= 2:
        caps[1] = config.cap_max
    return [(float(c), float(s)) for c, s in zip(caps, speeds)]


def label_tv_distance(labels, n_classes: int) -> float:
    """Total-variation distance between a label histogram and uniform."""
    hist = np.bincount(np.asarray(labels), minlength=n_classes) / max(len(labels), 1)
    return 0.5 * float(np.abs(hist - 1.0 / n_classes).sum())


# -- CSV import/export --------------------------------------------------------


def write_client_csv(path, X, y) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(X.shape[1])] + ["label"])
        for row, lab in zip(X, y):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])


def read_client_csv(path):
    path = Path(path)
    with path.open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if not header or header[-1] != "label":
            raise ValueError(f"{path}: last column must be 'label'")
        rows = list(r)
    X = np.array([[float(v) for v in row[:-1]] for row in rows], dtype=np.float64).reshape(len(rows), len(header) - 1)
    y = np.array([int(row[-1]) for row in rows], dtype=np.int64)
    return X, y


def export_clients(directory, clients) -> None:
    """One ``client_<id>.csv`` per client (train then test rows) plus ``capacities.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for c in clients:
        X = np.vstack([c.train[0], c.test[0]])
        y = np.concatenate([c.train[1], c.test[1]])
        write_client_csv(directory / f"client_{c.id}.csv", X, y)
    with (directory / "capacities.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["capacity_macs", "speed"])
        for c in clients:
            w.writerow([repr(float(c.capacity)), repr(float(c.speed))])


def read_capacities(path) -> list:
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != ["capacity_macs", "speed"]:
            raise ValueError(f"{path}: expected header capacity_macs,speed")
        return [(float(a), float(b)) for a, b in r]
