"""Independent brute-force reference implementations used by the tests."""

from __future__ import annotations

import itertools
import math
from fractions import Fraction


def auroc_pairs(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    credit = Fraction(0)
    for p, n in itertools.product(pos, neg):
        if p > n:
            credit += 1
        elif p == n:
            credit += Fraction(1, 2)
    return float(credit / (len(pos) * len(neg)))


def average_precision_enum(scores, labels) -> float:
    # stable descending order: sort by (-score, original index)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(labels)
    total, hits = Fraction(0), 0
    for k, i in enumerate(order, start=1):
        if labels[i] == 1:
            hits += 1
            total += Fraction(hits, k) * Fraction(1, n_pos)
    return float(total)


def f1_kappa_enum(scores, labels, threshold=0.5) -> tuple[float, float]:
    pred = [1 if s >= threshold else 0 for s in scores]
    tp = sum(1 for p, y in zip(pred, labels) if p == y == 1)
    fp = sum(1 for p, y in zip(pred, labels) if p == 1 and y == 0)
    fn = sum(1 for p, y in zip(pred, labels) if p == 0 and y == 1)
    tn = len(labels) - tp - fp - fn
    prec = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    rec = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else Fraction(0)
    n = len(labels)
    if n == 0:
        return float(f1), 0.0
    p_o = Fraction(tp + tn, n)
    p_e = Fraction(tp + fp, n) * Fraction(tp + fn, n) + Fraction(tn + fn, n) * Fraction(tn + fp, n)
    kappa = Fraction(0) if p_e == 1 else (p_o - p_e) / (1 - p_e)
    return float(f1), float(kappa)


def nce_rows(sim, tau):
    """Per-row -log(exp(s_ii/tau) / sum_{j != i} exp(s_ij/tau)) in plain floats."""
    out = []
    for i, row in enumerate(sim):
        denom = sum(math.exp(v / tau) for j, v in enumerate(row) if j != i)
        out.append(-(row[i] / tau - math.log(denom)))
    return out


def cosine(u, v, eps=1e-12):
    nu = math.sqrt(sum(a * a for a in u) + eps)
    nv = math.sqrt(sum(b * b for b in v) + eps)
    return sum((a / nu) * (b / nv) for a, b in zip(u, v))
