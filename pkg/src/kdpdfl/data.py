"""Datasets, synthetic generation, CSV ingestion and Dirichlet label-skew partitioning."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .nn import Batch

MAX_REDRAWS = 100


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    # indices into the pool the rows were drawn from, when applicable
    indices: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.size:
            raise ValueError("features must be (n, d) with one label per row")
        if np.isnan(self.features).any():
            raise ValueError("features contain NaN")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.labels.size

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        pool_idx = idx if self.indices is None else self.indices[idx]
        return Dataset(self.features[idx], self.labels[idx], self.n_classes, pool_idx)

    def as_batch(self) -> Batch:
        return Batch(self.features, self.labels)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass
class ClientData:
    client_id: int
    train: Dataset
    validation: Dataset
    test: Dataset


@dataclass
class PartitionSpec:
    M: int
    dirichlet_alpha: float = 0.1
    min_train: int = 15
    max_train: int = 100
    test_per_client: int = 100
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("M must be >= 2")
        if self.dirichlet_alpha <= 0:
            raise ValueError("dirichlet_alpha must be > 0")
        if not 1 <= self.min_train <= self.max_train:
            raise ValueError("need 1 <= min_train <= max_train")
        if self.test_per_client < 1:
            raise ValueError("test_per_client must be >= 1")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in [0, 1)")


def _rotation(n: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix turning every invariant plane by at most ``angle`` radians."""
    a = rng.normal(size=(n, n))
    skew = a - a.T
    skew /= np.abs(np.linalg.eigvals(skew)).max()
    return expm(angle * skew)


def generate_synthetic(
    n_classes: int = 9,
    n_features: int = 20,
    n_clusters: int = 2,
    samples_per_class: int = 600,
    seed: int = 0,
    class_std: float = 1.5,
    center_scale: float = 3.0,
    cluster_angle: float = 1.0,
    modes_per_class: int = 6,
) -> tuple[Dataset, np.ndarray]:
    """Gaussian class mixtures whose classes are grouped into rotated clusters.

    Each class is a mixture of ``modes_per_class`` isotropic blobs. Every
    cluster reuses one template of mode centers, turned by a rotation of
    ``cluster_index * cluster_angle`` radians, so classes of one cluster share
    a geometry. A client holding a few dozen samples sees only part of its
    classes' modes; peers with the same classes have seen the rest.

    Returns the pooled dataset and ``cluster_of_class`` (length n_classes).
    """
    if n_classes < 2 or n_features < 1 or samples_per_class < 1:
        raise ValueError("need n_classes >= 2, n_features >= 1, samples_per_class >= 1")
    if not 1 <= n_clusters <= n_classes:
        raise ValueError("n_clusters must be in [1, n_classes]")
    if class_std <= 0 or center_scale <= 0:
        raise ValueError("class_std and center_scale must be positive")
    if modes_per_class < 1:
        raise ValueError("modes_per_class must be >= 1")
    rng = np.random.default_rng(seed)

    cluster_of_class = np.arange(n_classes) % n_clusters
    per_cluster = int(np.bincount(cluster_of_class).max())
    template = rng.normal(size=(per_cluster, modes_per_class, n_features)) * center_scale
    if n_features == 1:
        rotations = [np.eye(1)] * n_clusters
    else:
        step = _rotation(n_features, cluster_angle, rng)
        rotations = [np.linalg.matrix_power(step, c) for c in range(n_clusters)]

    xs, ys = [], []
    slot = np.zeros(n_clusters, dtype=int)
    for k in range(n_classes):
        c = cluster_of_class[k]
        centers = template[slot[c]] @ rotations[c].T
        slot[c] += 1
        mode = rng.integers(modes_per_class, size=samples_per_class)
        xs.append(centers[mode] + rng.normal(size=(samples_per_class, n_features)) * class_std)
        ys.append(np.full(samples_per_class, k))
    return Dataset(np.vstack(xs), np.concatenate(ys), n_classes), cluster_of_class


def load_csv(path, label_column: str, normalize: bool = True) -> tuple[Dataset, dict]:
    """Read a headed, comma-delimited UTF-8 CSV.

    Labels are mapped to contiguous integers in sorted order of their string
    values; the mapping ``{original: index}`` is returned alongside.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=",")
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, header row required") from None
        if label_column not in header:
            raise ValueError(f"{path}: label column {label_column!r} not in header {header}")
        li = header.index(label_column)
        rows, raw_labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            feats = []
            for col, val in enumerate(row):
                if col == li:
                    continue
                try:
                    feats.append(float(val))
                except ValueError:
                    raise ValueError(
                        f"{path}:{lineno}: non-numeric value {val!r} in column {header[col]!r}"
                    ) from None
            rows.append(feats)
            raw_labels.append(row[li])
    if not rows:
        raise ValueError(f"{path}: no data rows")

    mapping = {lab: i for i, lab in enumerate(sorted(set(raw_labels)))}
    x = np.array(rows, dtype=np.float64)
    if normalize:
        x = zscore(x)
    y = np.array([mapping[lab] for lab in raw_labels])
    return Dataset(x, y, max(len(mapping), 2)), mapping


def zscore(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    out = x - mu
    nonconst = sd > 0
    out[:, nonconst] /= sd[nonconst]
    out[:, ~nonconst] = 0.0
    return out


def _client_counts(props: np.ndarray, total: int) -> np.ndarray:
    # largest-remainder rounding so counts sum exactly to total
    raw = props * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    if short:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(data: Dataset, spec: PartitionSpec) -> list[ClientData]:
    """Split a pool into non-i.i.d. clients.

    Each client draws class proportions from a symmetric Dirichlet, a train
    size uniform in ``[min_train, max_train]`` and ``test_per_client`` test
    samples, all from the same proportions and without replacement from the
    pool. Validation rows are carved out of the train allocation.
    """
    rng = np.random.default_rng(spec.seed)
    n_classes = data.n_classes
    need = spec.M * (spec.min_train + spec.test_per_client)
    if len(data) < need:
        raise ValueError(
            f"pool of {len(data)} samples cannot supply {need} "
            f"(M={spec.M} x (min_train={spec.min_train} + test={spec.test_per_client})); "
            f"short by {need - len(data)}"
        )

    available = [list(rng.permutation(np.flatnonzero(data.labels == k))) for k in range(n_classes)]
    clients = []
    for cid in range(spec.M):
        n_train = int(rng.integers(spec.min_train, spec.max_train + 1))
        total = n_train + spec.test_per_client
        left = np.array([len(a) for a in available])
        for _ in range(MAX_REDRAWS):
            props = rng.dirichlet(np.full(n_classes, spec.dirichlet_alpha))
            train_c = _client_counts(props, n_train)
            test_c = _client_counts(props, spec.test_per_client)
            if np.all(train_c + test_c <= left):
                break
        else:
            deficit = np.maximum(train_c + test_c - left, 0)
            raise ValueError(
                f"client {cid}: could not satisfy class proportions after {MAX_REDRAWS} "
                f"redraws; per-class shortfall {deficit.tolist()} (total {total})"
            )
        train_idx, test_idx = [], []
        for k in range(n_classes):
            take = available[k][: train_c[k] + test_c[k]]
            del available[k][: train_c[k] + test_c[k]]
            train_idx.extend(take[: train_c[k]])
            test_idx.extend(take[train_c[k] :])
        train_idx = rng.permutation(np.array(train_idx, dtype=np.int64))
        n_val = int(round(spec.validation_fraction * n_train))
        n_val = min(n_val, n_train - 1)
        clients.append(
            ClientData(
                client_id=cid,
                train=data.subset(np.sort(train_idx[n_val:])),
                validation=data.subset(np.sort(train_idx[:n_val])),
                test=data.subset(np.sort(np.array(test_idx, dtype=np.int64))),
            )
        )
    return clients


def partition_manifest(clients: list[ClientData]) -> dict:
    """JSON-ready mapping of client id to the pool indices of each split."""
    return {
        str(c.client_id): {
            split: getattr(c, split).indices.tolist()
            for split in ("train", "validation", "test")
        }
        for c in clients
    }


def write_manifest(clients: list[ClientData], path) -> None:
    Path(path).write_text(json.dumps(partition_manifest(clients), indent=1), encoding="utf-8")
