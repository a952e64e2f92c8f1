"""Binary classification metrics: AUROC, average precision, F1 and Cohen's kappa."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from hmp.errors import DegenerateLabels


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0/1")
    return s, y.astype(int)


def auroc(scores, labels) -> float:
    """Mann-Whitney statistic with ties counted as half."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUROC needs both classes")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Average precision over positives ranked by descending score.

    Tied scores keep their input order (stable sort), so the value depends on
    where positives sit within a tie.
    """
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DegenerateLabels("AUPR needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    tp = np.cumsum(hits)
    k = np.arange(1, y.size + 1)
    return float(np.sum((tp / k)[hits == 1]) / n_pos)


def f1_kappa(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    """F1 and Cohen's kappa after predicting 1 for ``score >= threshold``."""
    s, y = _check(scores, labels)
    pred = (s >= threshold).astype(int)
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    n = y.size
    if n == 0:
        return f1, 0.0
    tn = n - tp - fp - fn
    # integer counts keep p_e == 1 detectable exactly
    chance = (tp + fp) * (tp + fn) + (tn + fn) * (tn + fp)
    if chance == n * n:
        return f1, 0.0
    p_o = (tp + tn) / n
    p_e = chance / (n * n)
    kappa = (p_o - p_e) / (1.0 - p_e)
    return f1, kappa
