"""Batch-hard triplet loss, label-smoothed cross-entropy, and their sum."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .tensor import log_softmax_rows, sum_last


@dataclass
class LossConfig:
    margin: float = 0.3
    epsilon: float = 0.1
    n_classes: int | None = None
    triplet_reduction: str = "mean"

    def __post_init__(self):
        if self.margin < 0:
            raise DomainError(f"margin must be >= 0, got {self.margin}")
        if not 0.0 <= self.epsilon < 1.0:
            raise DomainError(f"epsilon must be in [0, 1), got {self.epsilon}")
        if self.triplet_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown triplet reduction {self.triplet_reduction!r}")


def pairwise_distances(f: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix; diagonal exactly zero, exactly symmetric."""
    return cross_distances(f, f)


def cross_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature dimension mismatch: {a.shape} vs {b.shape}")
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(sum_last(diff * diff))


def check_pk_labels(labels: np.ndarray) -> tuple[int, int]:
    """Validate a P x K batch; returns ``(P, K)``."""
    counts = Counter(np.asarray(labels).tolist())
    ks = set(counts.values())
    if len(ks) != 1:
        raise ShapeError(f"every identity must appear equally often, got counts {dict(counts)}")
    P, K = len(counts), ks.pop()
    if P < 2 or K < 2:
        raise ShapeError(f"batch-hard triplet loss needs P >= 2 and K >= 2, got P={P}, K={K}")
    return P, K


def _unit(diff: np.ndarray, dist: float) -> np.ndarray:
    if dist == 0:
        return np.zeros_like(diff)
    return diff / dist


def triplet_batch_hard(features: np.ndarray, labels, margin: float = 0.3, reduction: str = "mean"):
    """Batch-hard triplet loss and its (sub)gradient w.r.t. ``features``.

    For each anchor the farthest same-identity sample (anchor excluded) and
    the nearest other-identity sample are selected, ties to the lowest index.
    An inactive hinge (value <= 0) contributes no gradient.
    """
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ShapeError(f"features {features.shape} do not match {labels.shape[0]} labels")
    check_pk_labels(labels)
    B = features.shape[0]
    dist = pairwise_distances(features)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(B, dtype=bool)
    hardest_pos = np.where(pos_mask, dist, -np.inf).argmax(axis=1)
    hardest_neg = np.where(~same, dist, np.inf).argmin(axis=1)
    rows = np.arange(B)
    hinge = (margin + dist[rows, hardest_pos]) - dist[rows, hardest_neg]
    per_anchor = np.maximum(hinge, 0.0)

    total = features.dtype.type(0.0)
    for v in per_anchor:
        total = total + v
    scale = 1.0 / B if reduction == "mean" else 1.0
    loss = total / B if reduction == "mean" else total

    grad = np.zeros_like(features)
    for a in np.nonzero(hinge > 0)[0]:
        p, n = hardest_pos[a], hardest_neg[a]
        u_ap = _unit(features[a] - features[p], dist[a, p]) * scale
        u_an = _unit(features[a] - features[n], dist[a, n]) * scale
        grad[a] += u_ap - u_an
        grad[p] -= u_ap
        grad[n] += u_an
    return loss, grad


def label_smoothed_ce(logits: np.ndarray, labels, epsilon: float = 0.1):
    """Mean over rows of ``-log((1-eps) q_true + eps/N)`` and its gradient.

    ``q`` is the softmax of ``logits``. At ``epsilon == 0`` the log-softmax
    is used directly, giving plain cross-entropy without a round trip
    through exp/log.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    B, N = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= N):
        raise DomainError(f"labels must lie in [0, {N})")
    rows = np.arange(B)
    logq = log_softmax_rows(logits)
    q = np.exp(logq)
    q_true = q[rows, labels]
    onehot = np.zeros_like(logits)
    onehot[rows, labels] = 1.0
    if epsilon == 0.0:
        per_row = -logq[rows, labels]
        coef = np.ones(B, dtype=logits.dtype)
    else:
        s = (1.0 - epsilon) * q_true + epsilon / N
        per_row = -np.log(s)
        coef = (1.0 - epsilon) * q_true / s
    loss = per_row.sum() / B
    # d(-log s)/dz_k = -(1-eps) q_t (delta_kt - q_k) / s
    grad = (coef[:, None] * (q - onehot) / B).astype(logits.dtype)
    return loss, grad


@dataclass
class LossBreakdown:
    total: float
    triplet: float
    ce: float


def total_loss(features: np.ndarray, logits: np.ndarray, labels, cfg: LossConfig):
    """Unweighted sum of triplet and label-smoothed CE.

    Returns ``(LossBreakdown, grad_features, grad_logits)``; CE has no
    gradient path to ``features`` here since the classifier sits between.
    """
    if cfg.n_classes is not None and logits.shape[1] != cfg.n_classes:
        raise ShapeError(f"logits have {logits.shape[1]} classes, config says {cfg.n_classes}")
    l_tri, g_feat = triplet_batch_hard(features, labels, cfg.margin, cfg.triplet_reduction)
    l_ce, g_logits = label_smoothed_ce(logits, labels, cfg.epsilon)
    tri, ce = float(l_tri), float(l_ce)
    return LossBreakdown(ce + tri, tri, ce), g_feat, g_logits
