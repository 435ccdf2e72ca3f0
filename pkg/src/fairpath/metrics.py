"""Group fairness gaps and average precision."""
from __future__ import annotations

import math

import numpy as np

DEFAULT_THRESHOLDS = tuple(k / 10 for k in range(1, 10))


class EmptyGroupError(ValueError):
    pass


def _cell_mean(scores, mask, what):
    if not mask.any():
        raise EmptyGroupError(f"no samples in {what}")
    # correctly rounded, so e.g. ten copies of 0.6 average to exactly 0.6
    return math.fsum(scores[mask]) / int(mask.sum())


def _prepare(scores, *cols):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    out = [np.asarray(c).ravel().astype(int) for c in cols]
    for c in out:
        if c.shape != scores.shape:
            raise ValueError("scores and group/label arrays must have equal length")
    return (scores, *out)


def delta_dp(scores, sensitive):
    """|E[f | A=0] - E[f | A=1]|."""
    scores, a = _prepare(scores, sensitive)
    return float(abs(_cell_mean(scores, a == 0, "group 0") - _cell_mean(scores, a == 1, "group 1")))


def delta_eo(scores, labels, sensitive):
    """Sum over y of |E[f | A=0, Y=y] - E[f | A=1, Y=y]|; lies in [0, 2]."""
    scores, y, a = _prepare(scores, labels, sensitive)
    gap = 0.0
    for label in (0, 1):
        m0 = _cell_mean(scores, (a == 0) & (y == label), f"cell a=0,y={label}")
        m1 = _cell_mean(scores, (a == 1) & (y == label), f"cell a=1,y={label}")
        gap += abs(m0 - m1)
    return float(gap)


def _check_thresholds(thresholds):
    t = np.asarray(thresholds, dtype=np.float64)
    if t.ndim != 1 or t.size == 0 or np.any(t <= 0) or np.any(t >= 1) or np.any(np.diff(t) <= 0):
        raise ValueError("thresholds must be a non-empty strictly increasing sequence inside (0, 1)")
    return t


def mean_thresholded_dp(scores, sensitive, thresholds=DEFAULT_THRESHOLDS):
    """Average of ``delta_dp`` over the binarized predictors ``1[f >= t]``."""
    t = _check_thresholds(thresholds)
    scores = np.asarray(scores, dtype=np.float64)
    return float(np.mean([delta_dp((scores >= th).astype(np.float64), sensitive) for th in t]))


def mean_thresholded_eo(scores, labels, sensitive, thresholds=DEFAULT_THRESHOLDS):
    t = _check_thresholds(thresholds)
    scores = np.asarray(scores, dtype=np.float64)
    return float(np.mean([delta_eo((scores >= th).astype(np.float64), labels, sensitive) for th in t]))


def average_precision(scores, labels):
    """Mean of precision@k over the ranks k of positive samples.

    Ranking is by descending score; ties keep the original sample order.
    """
    scores, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    hits = y[order].astype(bool)
    ranks = np.flatnonzero(hits) + 1
    # precision at the i-th positive is i / rank_i; fsum keeps the total correctly rounded
    return math.fsum(np.arange(1, n_pos + 1) / ranks) / n_pos
