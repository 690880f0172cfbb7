"""Triplet + binary cross-entropy training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .functional import pairwise_distance
from .tensor import Tensor, as_tensor, clip, log, maximum

SCORE_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    """``margin`` caps the pushed normal/abnormal distance; ``lam`` weights the triplet term."""

    lam: float
    margin: float = 100.0
    batch_half: int = 16

    def __post_init__(self):
        if self.margin < 0 or self.lam < 0:
            raise ContractError(f"margin and lambda must be non-negative, got {self.margin}, {self.lam}")
        if self.batch_half < 1:
            raise ContractError(f"batch_half must be positive, got {self.batch_half}")


def triplet_loss(normals, abnormals, margin: float = 100.0) -> Tensor:
    """Pull normal embeddings together, push abnormals out to ``margin``.

    mean_i max_{j != i} |n_i - n_j|  +  mean_i max(0, margin - min_j |n_i - a_j|)

    Ties in max/min route the subgradient to the first index.
    """
    normals, abnormals = as_tensor(normals), as_tensor(abnormals)
    if normals.ndim != 2 or abnormals.ndim != 2 or normals.shape[1] != abnormals.shape[1]:
        raise DimensionError(f"embedding shapes disagree: {normals.shape} vs {abnormals.shape}")
    n = normals.shape[0]
    if n < 2:
        raise ContractError(f"triplet loss needs at least 2 normal embeddings, got {n}")

    d_nn = pairwise_distance(normals, normals)
    # drop the diagonal: row i keeps columns j != i, in order
    cols = np.array([[j for j in range(n) if j != i] for i in range(n)])
    rows = np.repeat(np.arange(n)[:, None], n - 1, axis=1)
    spread = d_nn[rows, cols].max(axis=1).mean()

    nearest = pairwise_distance(normals, abnormals).min(axis=1)
    push = maximum(margin - nearest, 0.0).mean()
    return spread + push


def bce_loss(scores, labels) -> Tensor:
    """Mean binary cross-entropy with scores clamped to [1e-7, 1 - 1e-7]."""
    scores = as_tensor(scores)
    y = np.asarray(labels, dtype=scores.dtype)
    if y.shape != scores.shape:
        raise DimensionError(f"scores {scores.shape} and labels {y.shape} differ")
    s = clip(scores, SCORE_EPS, 1.0 - SCORE_EPS)
    ll = log(s) * y + log(1.0 - s) * (1.0 - y)
    return -ll.mean()


def combined_loss(scores, labels, normals, abnormals, cfg: LossConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(total, bce, triplet)`` with ``total = bce + lam * triplet``.

    With ``lam == 0`` the triplet term is still evaluated for logging but is
    left out of the graph, so ``total`` is exactly ``bce``.
    """
    bce = bce_loss(scores, labels)
    trip = triplet_loss(normals, abnormals, cfg.margin)
    if cfg.lam == 0:
        return bce, bce, Tensor(trip.data)
    return bce + trip * cfg.lam, bce, trip
