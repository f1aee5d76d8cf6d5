"""Ranking metrics over scored positive/negative pairs."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class UndefinedMetric(ValueError):
    """Raised when a metric needs both classes but only one is present."""


def _validate(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 1:
        raise ValueError(f"labels {y.shape} and scores {s.shape} must be equal-length vectors")
    return y, s


def average_precision(labels, scores) -> float:
    """Step-interpolated area under precision-recall.

    Tied scores form one threshold, so the value is independent of the order
    of equal scores.
    """
    y, s = _validate(labels, scores)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetric("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), len(s_sorted) - 1]
    tp = np.cumsum(y_sorted)[ends]
    seen = ends + 1
    precision = tp / seen
    recall_step = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(recall_step * precision))


def roc_auc(labels, scores) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    y, s = _validate(labels, scores)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs both positive and negative labels")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def accuracy(labels, logits, threshold: float = 0.5) -> float:
    """Fraction correct when predicting positive for ``sigmoid(logit) >= threshold``."""
    y = np.asarray(labels).astype(bool)
    z = np.asarray(logits, dtype=np.float64)
    prob = 0.5 * (1.0 + np.tanh(0.5 * z))
    return float(np.mean((prob >= threshold) == y)) if len(y) else float("nan")


def link_metrics(pos_logits, neg_logits) -> dict[str, float]:
    pos = np.asarray(pos_logits, dtype=np.float64)
    neg = np.asarray(neg_logits, dtype=np.float64)
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    return {
        "ap": average_precision(labels, scores),
        "accuracy": accuracy(labels, scores),
        "auc": roc_auc(labels, scores),
    }
