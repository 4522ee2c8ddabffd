"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (explicit loops, pair counting,
brute-force grids) and shares no code with the package paths it checks.
"""
from __future__ import annotations

import numpy as np


def unrolled_scan(abar, bu, c, d_skip, u):
    """Triple-loop recurrence; returns (y [L, D], h history [L, D, N])."""
    L, D, N = abar.shape
    y = np.zeros((L, D))
    hs = np.zeros((L, D, N))
    h = np.zeros((D, N))
    for t in range(L):
        for d in range(D):
            for n in range(N):
                h[d, n] = abar[t, d, n] * h[d, n] + bu[t, d, n]
            acc = 0.0
            for n in range(N):
                acc += c[t, n] * h[d, n]
            y[t, d] = acc + d_skip[d] * u[t, d]
        hs[t] = h
    return y, hs


def confusion_prf(labels, preds, k):
    """Per-class precision/recall/F1 from an explicit confusion matrix."""
    cm = np.zeros((k, k), dtype=int)
    for t, p in zip(labels, preds):
        cm[t, p] += 1
    precisions, recalls, f1s = [], [], []
    for c in range(k):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        precisions.append(p)
        recalls.append(r)
        f1s.append(f)
    return precisions, recalls, f1s


def pairwise_auroc(scores, positive):
    """AUROC by counting concordant pairs, ties worth one half."""
    pos = np.asarray(scores)[np.asarray(positive)]
    neg = np.asarray(scores)[~np.asarray(positive)]
    wins = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def grid_worst_mismatch(strides, n_points=1_000_000):
    """Brute-force maximum of min |log tau - log s| over a dense tau grid."""
    s = np.asarray(strides, dtype=np.float64)
    taus = np.linspace(s[0], s[-1], n_points)
    dists = np.min(np.abs(np.log(taus)[:, None] - np.log(s)[None, :]), axis=1)
    return float(dists.max())


def avg_pool(x, k):
    """Non-overlapping k-sample averaging (remainder dropped)."""
    n = (len(x) // k) * k
    return x[:n].reshape(-1, k).mean(axis=1)


def high_pass(x, k):
    """Subtract a centered k-sample moving average."""
    kernel = np.ones(k) / k
    smooth = np.convolve(x, kernel, mode="same")
    return x - smooth


def half_diff_stat(x):
    """Mean of the second half minus mean of the first half (drift probe)."""
    mid = len(x) // 2
    return float(np.mean(x[mid:]) - np.mean(x[:mid]))


def energy_stat(x):
    return float(np.std(x))
