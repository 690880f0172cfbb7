"""ROC AUC via the Mann-Whitney rank statistic, with a quadratic reference."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import DimensionError, UndefinedMetricError


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise DimensionError(f"{s.size} scores but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    return s, y


def auc_roc(scores, labels) -> float:
    """P(score of a random positive > a random negative), ties counting 1/2.

    Ties get average ranks, so the rank-sum statistic stays a half-integer and
    the result matches the pairwise count exactly.
    """
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_bruteforce(scores, labels) -> float:
    """Explicit loop over every (positive, negative) pair."""
    s, y = _validate(scores, labels)
    if s.size > 10_000:
        raise ValueError("auc_bruteforce is quadratic; use auc_roc for n > 10^4")
    pos = [float(v) for v in s[y]]
    neg = [float(v) for v in s[~y]]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))
