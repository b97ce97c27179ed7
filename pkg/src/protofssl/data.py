"""Datasets, synthetic blobs, client partitioning and the on-disk format.

On disk a dataset is a JSON manifest next to two raw little-endian arrays::

    {"n": 1000, "dim": 16, "k": 4, "features": "features.f32",
     "labels": "labels.i32", "endianness": "little"}

Features are row-major float32 (n x dim), labels int32 (n,).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DatasetFormatError, SizingError

MANIFEST_KEYS = ("n", "dim", "k", "features", "labels", "endianness")


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DatasetFormatError(
                f"features {self.features.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DatasetFormatError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other):
        return (isinstance(other, Dataset) and self.n_classes == other.n_classes
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))


@dataclass
class ClientData:
    """What local training is allowed to see: no labels for the unlabeled pool."""

    client_id: int
    n_classes: int
    labeled: dict[int, np.ndarray]
    unlabeled: np.ndarray

    @property
    def n_labeled(self) -> int:
        return int(sum(len(v) for v in self.labeled.values()))

    @property
    def n_unlabeled(self) -> int:
        return int(self.unlabeled.shape[0])

    def __len__(self):
        return self.n_labeled + self.n_unlabeled


@dataclass
class ClientDataset(ClientData):
    hidden_unlabeled_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    labeled_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    unlabeled_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def training_view(self) -> ClientData:
        return ClientData(self.client_id, self.n_classes, self.labeled, self.unlabeled)


@dataclass
class PartitionSpec:
    n_clients: int = 20
    labeled_per_class: int = 2
    unlabeled_per_client: int = 100
    distribution: str = "dirichlet"
    alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigurationError("n_clients must be >= 1")
        if self.labeled_per_class < 0 or self.unlabeled_per_client < 0:
            raise ConfigurationError("sample counts must be >= 0")
        if self.distribution not in ("iid", "dirichlet"):
            raise ConfigurationError("distribution must be 'iid' or 'dirichlet'")
        if self.distribution == "dirichlet" and self.alpha <= 0:
            raise ConfigurationError("dirichlet alpha must be > 0")


def synth_blobs(k: int, n: int, dim: int, separation: float = 4.0, seed=0,
                cluster_std: float = 1.0, nuisance_std: float = 0.0) -> Dataset:
    """Balanced Gaussian clusters.

    Class means sit on a randomly rotated simplex so every pair of means is
    exactly ``separation`` apart (when k <= dim); for k > dim random
    directions are rescaled until the closest pair reaches ``separation``.
    ``nuisance_std`` adds extra variance along the directions orthogonal to
    the means: it leaves the Bayes classifier unchanged but swamps raw
    Euclidean distances until a representation learns to ignore it.
    """
    if k < 2 or n < k:
        raise ConfigurationError("synth_blobs needs k >= 2 and n >= k")
    rng = np.random.default_rng(seed)
    if k <= dim:
        basis, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        means = basis[:k] * (separation / np.sqrt(2.0))
    else:
        means = rng.normal(size=(k, dim))
        diff = means[:, None, :] - means[None, :, :]
        d = np.sqrt((diff ** 2).sum(-1))
        closest = d[~np.eye(k, dtype=bool)].min()
        means *= separation / closest
    labels = np.arange(n) % k
    rng.shuffle(labels)
    feats = means[labels] + cluster_std * rng.normal(size=(n, dim))
    if nuisance_std > 0 and k < dim:
        feats += nuisance_std * rng.normal(size=(n, dim - k)) @ basis[k:]
    return Dataset(feats.astype(np.float32), labels, k)


def largest_remainder(shares, total: int, tie_offset: int = 0) -> np.ndarray:
    """Integer allocation of ``total`` proportional to ``shares`` summing exactly to ``total``.

    Ties in the fractional parts are broken by class index, rotated by ``tie_offset``.
    """
    shares = np.asarray(shares, dtype=np.float64)
    quota = shares / shares.sum() * total
    base = np.floor(quota).astype(np.int64)
    left = int(total - base.sum())
    if left:
        k = len(shares)
        rot = (np.arange(k) - tie_offset) % k
        order = np.lexsort((rot, -(quota - base)))
        base[order[:left]] += 1
    return base


def _allocation(spec: PartitionSpec, k: int, rng) -> np.ndarray:
    out = np.zeros((spec.n_clients, k), dtype=np.int64)
    for i in range(spec.n_clients):
        if spec.distribution == "iid":
            shares = np.ones(k)
        else:
            shares = rng.dirichlet(np.full(k, spec.alpha))
            if not np.all(np.isfinite(shares)) or shares.sum() <= 0:
                shares = np.ones(k)
        out[i] = largest_remainder(shares, spec.unlabeled_per_client, tie_offset=i)
    return out


def partition(dataset: Dataset, spec: PartitionSpec) -> list[ClientDataset]:
    """Split ``dataset`` into disjoint per-client labeled/unlabeled sets."""
    k = dataset.n_classes
    rng = np.random.default_rng(spec.seed)
    pools = []
    for c in range(k):
        idx = np.flatnonzero(dataset.labels == c)
        pools.append(list(rng.permutation(idx)))
    alloc = _allocation(spec, k, rng)

    need = spec.n_clients * spec.labeled_per_class + alloc.sum(axis=0)
    have = np.array([len(p) for p in pools])
    short = need - have
    if np.any(short > 0):
        detail = ", ".join(f"class {c}: need {need[c]}, have {have[c]} (short {short[c]})"
                           for c in np.flatnonzero(short > 0))
        raise SizingError(f"dataset too small for partition: {detail}")

    cursor = [0] * k

    def take(c, m):
        sel = pools[c][cursor[c]:cursor[c] + m]
        cursor[c] += m
        return np.asarray(sel, dtype=np.int64)

    clients = []
    for i in range(spec.n_clients):
        labeled, lab_idx = {}, []
        for c in range(k):
            sel = take(c, spec.labeled_per_class)
            if sel.size:
                labeled[c] = dataset.features[sel]
                lab_idx.append(sel)
        unl_idx = [take(c, int(alloc[i, c])) for c in range(k)]
        unl_idx = np.concatenate(unl_idx) if unl_idx else np.zeros(0, np.int64)
        unl_idx = unl_idx[rng.permutation(unl_idx.size)]
        clients.append(ClientDataset(
            client_id=i,
            n_classes=k,
            labeled=labeled,
            unlabeled=dataset.features[unl_idx].reshape(-1, dataset.dim),
            hidden_unlabeled_labels=dataset.labels[unl_idx],
            labeled_indices=np.concatenate(lab_idx) if lab_idx else np.zeros(0, np.int64),
            unlabeled_indices=unl_idx,
        ))
    return clients


def save_dataset(dataset: Dataset, directory, stem: str = "data") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    feat_name, lab_name = f"{stem}.features.f32", f"{stem}.labels.i32"
    dataset.features.astype("<f4").tofile(directory / feat_name)
    dataset.labels.astype("<i4").tofile(directory / lab_name)
    manifest = {"n": len(dataset), "dim": dataset.dim, "k": dataset.n_classes,
                "features": feat_name, "labels": lab_name, "endianness": "little"}
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _read_raw(path: Path, dtype: str, count: int) -> np.ndarray:
    if not path.is_file():
        raise DatasetFormatError(f"{path}: referenced binary does not exist")
    itemsize = np.dtype(dtype).itemsize
    size = os.path.getsize(path)
    if size != count * itemsize:
        raise DatasetFormatError(
            f"{path.name}: expected {count * itemsize} bytes ({count} values), found {size}")
    return np.fromfile(path, dtype=dtype, count=count)


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{manifest_path}: cannot parse manifest ({exc})") from exc
    if not isinstance(manifest, dict):
        raise DatasetFormatError(f"{manifest_path}: manifest must be a JSON object")
    missing = [key for key in MANIFEST_KEYS if key not in manifest]
    if missing:
        raise DatasetFormatError(f"{manifest_path}: missing keys {missing}")
    if manifest["endianness"] != "little":
        raise DatasetFormatError(f"{manifest_path}: unsupported endianness {manifest['endianness']!r}")
    for key in ("n", "dim", "k"):
        if not isinstance(manifest[key], int) or isinstance(manifest[key], bool) or manifest[key] < 0:
            raise DatasetFormatError(f"{manifest_path}: {key!r} must be a non-negative integer")
    n, dim, k = manifest["n"], manifest["dim"], manifest["k"]
    root = manifest_path.parent
    feats = _read_raw(root / manifest["features"], "<f4", n * dim).reshape(n, dim)
    labels = _read_raw(root / manifest["labels"], "<i4", n)
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        raise DatasetFormatError(
            f"{manifest['labels']}: label {int(labels[bad[0]])} at row {int(bad[0])} outside [0, {k})")
    return Dataset(feats.astype(np.float32), labels.astype(np.int64), k)
