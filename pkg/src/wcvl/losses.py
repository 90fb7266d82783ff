"""Training objectives with analytic gradients.

All distances are Euclidean on raw (unnormalized) embeddings. Where a
distance is exactly zero its gradient is taken as zero, and the hinge
subgradient at exactly zero slack is zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LabelOutOfRange, NoNegative, NoPositive
from .numerics import pairwise_euclidean


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.3

    def __post_init__(self):
        if not self.margin >= 0:
            raise ValueError("triplet margin must be >= 0")


@dataclass(frozen=True)
class BetaConfig:
    beta: float = 1.0
    margin: float = 0.3

    def __post_init__(self):
        if not self.beta >= 1:
            raise ValueError("beta must be >= 1")
        if not self.margin >= 0:
            raise ValueError("triplet margin must be >= 0")


@dataclass
class MiningResult:
    positive: np.ndarray  # index of farthest same-label sample per anchor
    negative: np.ndarray  # index of closest other-label sample per anchor
    d_pos: np.ndarray
    d_neg: np.ndarray


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, m = logits.shape
    if n < 1 or len(labels) != n:
        raise ValueError("need one label per logit row and at least one row")
    if labels.min() < 0 or labels.max() >= m:
        raise LabelOutOfRange(f"labels must lie in [0, {m})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_z[:, None]
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def hardest_positive(dist, labels) -> np.ndarray:
    """Index of the farthest other sample with the same label, per anchor.

    The anchor itself is excluded by index, so duplicated rows still mine a
    genuine peer. Ties go to the lowest index.
    """
    dist = np.asarray(dist, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    pos_mask = (labels[:, None] == labels[None, :]) & ~np.eye(n, dtype=bool)
    if not pos_mask.any(axis=1).all():
        lonely = labels[~pos_mask.any(axis=1)][0]
        raise NoPositive(f"label {lonely} appears only once in the batch")
    # argmax returns the first maximum, which is the tie-break rule
    return np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)


def mine_batch_hard(dist, labels) -> MiningResult:
    """Farthest positive and closest negative per anchor; ties go to the lowest index."""
    dist = np.asarray(dist, dtype=np.float64)
    labels = np.asarray(labels)
    positive = hardest_positive(dist, labels)
    same = labels[:, None] == labels[None, :]
    if same.all():
        raise NoNegative("batch contains a single label")
    negative = np.argmin(np.where(same, np.inf, dist), axis=1)
    rows = np.arange(len(labels))
    return MiningResult(positive, negative, dist[rows, positive], dist[rows, negative])


def _unit_diff(x, i, j, d):
    """(x_i - x_j) / d with zero where d == 0."""
    diff = x[i] - x[j]
    scale = np.divide(1.0, d, out=np.zeros_like(d), where=d > 0)
    return diff * scale[:, None]


def _hard_triplet(x, labels, margin, beta):
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    mined = mine_batch_hard(pairwise_euclidean(x, x), labels)
    slack = mined.d_pos - mined.d_neg + margin
    active = (slack > 0).astype(np.float64)
    loss = float(np.mean((beta - 1.0) * mined.d_pos + np.maximum(slack, 0.0)))

    rows = np.arange(n)
    coef_p = ((beta - 1.0) + active) / n
    coef_n = active / n
    u_p = _unit_diff(x, rows, mined.positive, mined.d_pos) * coef_p[:, None]
    u_n = _unit_diff(x, rows, mined.negative, mined.d_neg) * coef_n[:, None]
    dx = u_p - u_n
    np.add.at(dx, mined.positive, -u_p)
    np.add.at(dx, mined.negative, u_n)
    return loss, dx, mined


def triplet_batch_hard(x, labels, cfg: TripletConfig = TripletConfig()):
    """Batch-hard triplet loss mean_i [d(a, p) - d(a, n) + margin]_+.

    Returns ``(loss, dloss/dx, mining)``.
    """
    return _hard_triplet(x, labels, cfg.margin, 1.0)


def beta_triplet(x, labels, cfg: BetaConfig):
    """Triplet loss with the positive distance re-weighted by ``beta``.

    loss = mean_i (beta - 1) d(a, p) + [d(a, p) - d(a, n) + margin]_+

    which upper-bounds mean_i [beta d(a, p) - d(a, n) + margin]_+. With
    beta = 1 the result is bitwise identical to :func:`triplet_batch_hard`.
    """
    loss, dx, _ = _hard_triplet(x, labels, cfg.margin, cfg.beta)
    return loss, dx


def cross_view_mse(x_cv, x_g, labels, variant: str = "as_written"):
    """Pull each anchor's cross-view feature onto its hardest positive's global feature.

    Positives are mined in ``x_g`` space and the targets are treated as
    constants; no negative is needed. ``as_written`` averages unsquared
    residual norms; ``squared`` averages squared norms. Returns
    ``(loss, dloss/dx_cv, positive_indices)``.
    """
    x_cv = np.asarray(x_cv, dtype=np.float64)
    x_g = np.asarray(x_g, dtype=np.float64)
    if x_cv.shape != x_g.shape:
        raise ValueError(f"feature shapes differ: {x_cv.shape} vs {x_g.shape}")
    n = len(x_cv)
    positive = hardest_positive(pairwise_euclidean(x_g, x_g), labels)
    resid = x_cv - x_g[positive]
    if variant == "as_written":
        norms = np.sqrt(np.einsum("ij,ij->i", resid, resid))
        loss = float(norms.mean())
        scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
        grad = resid * scale[:, None] / n
    elif variant == "squared":
        loss = float(np.einsum("ij,ij->i", resid, resid).mean())
        grad = 2.0 * resid / n
    else:
        raise ValueError(f"unknown mse variant {variant!r}")
    return loss, grad, positive
