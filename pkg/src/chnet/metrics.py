"""Evaluation metrics."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidArgument, UndefinedMetric


def rmse(predictions, truths, scale: float = 1.0) -> float:
    """Root mean squared error; ``scale`` maps normalised units back to data units."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape:
        raise InvalidArgument(f"shape mismatch {p.shape} vs {t.shape}")
    if p.size == 0:
        raise InvalidArgument("rmse of an empty set")
    d = (p - t) * scale
    return float(np.sqrt(np.mean(d * d)))


def auroc(scores, labels) -> float:
    """P(score of a random positive > score of a random negative), ties counted 1/2.

    Computed from average ranks (Mann-Whitney U).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise InvalidArgument(f"shape mismatch {s.shape} vs {y.shape}")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUROC needs both classes")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
