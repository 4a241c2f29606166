"""Prediction metrics."""
from __future__ import annotations

import numpy as np


class UndefinedMetricError(ValueError):
    pass


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative; ties count 1/2.

    Computed from exact pair counts, so the result equals brute-force pair
    enumeration bit for bit.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.size} vs {labels.size}")
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    below = np.searchsorted(neg, pos, side="left")
    upto = np.searchsorted(neg, pos, side="right")
    # twice the Mann-Whitney U, kept integral
    u2 = int(np.sum(below, dtype=np.int64)) * 2 + int(np.sum(upto - below, dtype=np.int64))
    return u2 / (2 * pos.size * neg.size)


def rmse(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError("rmse of an empty set")
    return float(np.sqrt(np.mean((scores - labels) ** 2)))
