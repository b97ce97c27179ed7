"""Prototype math: class centroids, distance-softmax posteriors, helper
averaging, sharpening, pseudo-labels and the training losses.

Soft labels are float64 arrays whose last axis runs over the full class
universe; classes a prototype set does not cover get probability zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError, DimensionError, EmptySupportError
from .numerics import PROB_FLOOR

METRICS = ("sqeuclidean", "euclidean")
_LOG_FLOOR = np.log(PROB_FLOOR)
_EUCLID_EPS = 1e-12


@dataclass
class PrototypeSet:
    owner_id: int
    round: int
    n_classes: int
    vectors: dict[int, np.ndarray] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.vectors.items():
            if not 0 <= k < self.n_classes:
                raise DimensionError(f"class {k} outside [0, {self.n_classes})")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"prototype for class {k} has non-finite entries")

    @property
    def class_present(self) -> set[int]:
        return set(self.vectors)

    @property
    def embedding_dim(self) -> int:
        return len(next(iter(self.vectors.values())))

    def matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """(sorted class ids, stacked prototype rows)."""
        classes = np.array(sorted(self.vectors), dtype=np.int64)
        if classes.size == 0:
            raise EmptySupportError(f"prototype set of client {self.owner_id} is empty")
        return classes, np.stack([self.vectors[k] for k in classes]).astype(np.float64)

    def copy(self) -> "PrototypeSet":
        return PrototypeSet(self.owner_id, self.round, self.n_classes,
                            {k: v.copy() for k, v in self.vectors.items()}, dict(self.counts))


@dataclass
class SslHyperparams:
    temperature: float = 0.5
    unlabeled_weight: float = 0.3
    n_support: int = 1
    n_query_labeled: int = 2
    n_query_unlabeled: int = 100
    metric: str = "sqeuclidean"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be > 0")
        if self.unlabeled_weight < 0:
            raise ConfigurationError("unlabeled_weight must be >= 0")
        if min(self.n_support, self.n_query_labeled, self.n_query_unlabeled) < 1:
            raise ConfigurationError("sampling sizes must be positive integers")
        if self.metric not in METRICS:
            raise ConfigurationError(f"metric must be one of {METRICS}")


def make_prototype(embeddings) -> np.ndarray:
    e = np.atleast_2d(np.asarray(embeddings))
    if e.shape[0] == 0:
        raise EmptySupportError("cannot build a prototype from an empty support set")
    return e.astype(np.float64).mean(axis=0)


def build_prototypes(embeddings, labels, n_classes, owner_id=0, round=0) -> PrototypeSet:
    """Per-class means of ``embeddings``; classes without rows are left out."""
    e = np.asarray(embeddings)
    means, counts = kernels.segment_mean(e.astype(np.float64), np.asarray(labels), n_classes)
    present = np.flatnonzero(counts)
    return PrototypeSet(owner_id, round, n_classes,
                        {int(k): means[k] for k in present},
                        {int(k): int(counts[k]) for k in present})


def distances(x, protos: np.ndarray, metric: str = "sqeuclidean") -> np.ndarray:
    sq = kernels.pairwise_sq_dist(np.atleast_2d(np.asarray(x, dtype=np.float64)),
                                  np.asarray(protos, dtype=np.float64))
    if metric == "sqeuclidean":
        return sq
    if metric == "euclidean":
        return np.sqrt(sq + _EUCLID_EPS)
    raise ConfigurationError(f"unknown metric {metric!r}")


def _log_probs(x, protos: PrototypeSet, metric) -> tuple[np.ndarray, np.ndarray]:
    classes, mat = protos.matrix()
    return classes, kernels.log_softmax_rows(-distances(x, mat, metric))


def class_probabilities(embedding, protos: PrototypeSet, metric: str = "sqeuclidean") -> np.ndarray:
    """softmax(-distance) over the classes ``protos`` covers, zero elsewhere.

    Accepts one embedding (d,) or a batch (N x d).
    """
    emb = np.asarray(embedding)
    classes, logp = _log_probs(emb, protos, metric)
    out = np.zeros((logp.shape[0], protos.n_classes))
    p = np.exp(logp)
    out[:, classes] = p / p.sum(axis=1, keepdims=True)
    return out[0] if emb.ndim == 1 else out


def average_over_helpers(per_helper) -> np.ndarray:
    if len(per_helper) == 0:
        raise ValueError("average_over_helpers needs at least one helper")
    stacked = np.stack([np.asarray(p, dtype=np.float64) for p in per_helper])
    avg = stacked.mean(axis=0)
    return avg / avg.sum(axis=-1, keepdims=True)


def sharpen(p, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise ConfigurationError("temperature must be > 0")
    p = np.asarray(p, dtype=np.float64)
    pos = p > 0
    logp = np.where(pos, np.log(np.where(pos, p, 1.0)), -np.inf) / temperature
    logp -= logp.max(axis=-1, keepdims=True)
    out = np.where(pos, np.exp(logp), 0.0)
    return out / out.sum(axis=-1, keepdims=True)


def pseudo_label(u_embedding, helpers, temperature: float, metric: str = "sqeuclidean") -> np.ndarray:
    per_helper = [class_probabilities(u_embedding, h, metric) for h in helpers]
    return sharpen(average_over_helpers(per_helper), temperature)


def _xent_and_grads(x, centers, targets, row_weights, metric):
    """Weighted sum of CE(target_i, softmax(-d(x_i, centers))) and its gradients.

    ``targets`` is N x M over the columns of ``centers``. Returns
    (loss, d/dx, d/dcenters).
    """
    x = np.asarray(x, dtype=np.float64)
    sq = kernels.pairwise_sq_dist(x, centers)
    d = sq if metric == "sqeuclidean" else np.sqrt(sq + _EUCLID_EPS)
    logp = kernels.log_softmax_rows(-d)
    alive = logp > _LOG_FLOOR
    clamped = np.where(alive, logp, _LOG_FLOOR)
    loss = float(-(row_weights[:, None] * targets * clamped).sum())
    dlogp = -row_weights[:, None] * targets * alive
    p = np.exp(logp)
    dz = dlogp - p * dlogp.sum(axis=1, keepdims=True)
    g = -dz
    if metric == "euclidean":
        g = g / (2.0 * d)
    dx = 2.0 * (g.sum(axis=1, keepdims=True) * x - g @ centers)
    dc = 2.0 * (g.sum(axis=0)[:, None] * centers - g.T @ x)
    return loss, dx, dc


def _one_hot_over(labels, classes) -> np.ndarray:
    col = {int(k): j for j, k in enumerate(classes)}
    missing = sorted({int(y) for y in labels} - set(col))
    if missing:
        raise EmptySupportError(f"queries for classes {missing} but no prototype")
    t = np.zeros((len(labels), len(classes)))
    t[np.arange(len(labels)), [col[int(y)] for y in labels]] = 1.0
    return t


def _flatten_queries(query_embeddings: dict) -> tuple[np.ndarray, np.ndarray]:
    rows, labels = [], []
    for k in sorted(query_embeddings):
        q = np.atleast_2d(np.asarray(query_embeddings[k], dtype=np.float64))
        rows.append(q)
        labels += [k] * q.shape[0]
    if not rows:
        raise ValueError("no labeled queries")
    return np.concatenate(rows), np.asarray(labels, dtype=np.int64)


def prototypical_loss(query_embeddings: dict, protos: PrototypeSet, metric: str = "sqeuclidean") -> float:
    """Mean -log p_y(x) over all labeled queries, p from distance-softmax."""
    x, y = _flatten_queries(query_embeddings)
    classes, mat = protos.matrix()
    t = _one_hot_over(y, classes)
    loss, _, _ = _xent_and_grads(x, mat, t, np.full(len(y), 1.0 / len(y)), metric)
    return loss


def _soft_over(pseudo, classes, n_classes) -> np.ndarray:
    pseudo = np.atleast_2d(np.asarray(pseudo, dtype=np.float64))
    if pseudo.shape[1] != n_classes:
        raise DimensionError(f"pseudo-labels have {pseudo.shape[1]} classes, expected {n_classes}")
    return pseudo[:, classes]


def combined_loss(labeled_query: dict, unlabeled_query, pseudo, local_protos: PrototypeSet,
                  lam: float, metric: str = "sqeuclidean") -> float:
    """Labeled cross-entropy plus ``lam`` times the pseudo-label cross-entropy."""
    x, y = _flatten_queries(labeled_query)
    classes, mat = local_protos.matrix()
    lab, _, _ = _xent_and_grads(x, mat, _one_hot_over(y, classes), np.full(len(y), 1.0 / len(y)), metric)
    u = np.atleast_2d(np.asarray(unlabeled_query, dtype=np.float64))
    if u.shape[0] == 0 or lam == 0:
        return lab
    if len(pseudo) != u.shape[0]:
        raise DimensionError(f"{len(pseudo)} pseudo-labels for {u.shape[0]} unlabeled queries")
    t = _soft_over(pseudo, classes, local_protos.n_classes)
    unl, _, _ = _xent_and_grads(u, mat, t, np.full(u.shape[0], 1.0 / u.shape[0]), metric)
    return lab + lam * unl


@dataclass
class EpisodeResult:
    labeled_loss: float
    unlabeled_loss: float
    total: float
    grad_support: np.ndarray
    grad_query: np.ndarray
    grad_unlabeled: np.ndarray


def episode_loss_and_grads(support, support_labels, query, query_labels, unlabeled, pseudo,
                           lam: float, n_classes: int, metric: str = "sqeuclidean",
                           fixed_protos: PrototypeSet | None = None) -> EpisodeResult:
    """Combined loss of one local epoch with gradients w.r.t. every embedding.

    Prototypes are support means (gradient flows back into the support rows)
    unless ``fixed_protos`` is given, in which case they are constants.
    Pseudo-labels are treated as constants.
    """
    query = np.asarray(query, dtype=np.float64)
    support = np.asarray(support, dtype=np.float64).reshape(-1, query.shape[1])
    unlabeled = np.asarray(unlabeled, dtype=np.float64).reshape(-1, query.shape[1])
    if fixed_protos is None:
        protos = build_prototypes(support, support_labels, n_classes)
    else:
        protos = fixed_protos
    classes, centers = protos.matrix()

    w_lab = np.full(len(query_labels), 1.0 / max(len(query_labels), 1))
    lab, dq, dc = _xent_and_grads(query, centers, _one_hot_over(query_labels, classes), w_lab, metric)

    du = np.zeros_like(unlabeled)
    unl = 0.0
    if lam > 0 and unlabeled.shape[0] > 0:
        t = _soft_over(pseudo, classes, n_classes)
        w_u = np.full(unlabeled.shape[0], lam / unlabeled.shape[0])
        unl_scaled, du, dc_u = _xent_and_grads(unlabeled, centers, t, w_u, metric)
        unl = unl_scaled / lam
        dc = dc + dc_u

    ds = np.zeros_like(support)
    if fixed_protos is None and support.shape[0]:
        col = {int(k): j for j, k in enumerate(classes)}
        sl = np.asarray(support_labels)
        idx = np.array([col[int(k)] for k in sl])
        counts = np.array([protos.counts[int(k)] for k in sl], dtype=np.float64)
        ds = dc[idx] / counts[:, None]
    return EpisodeResult(lab, unl, lab + lam * unl, ds, dq, du)
