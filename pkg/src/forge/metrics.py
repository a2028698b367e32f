"""Representation-quality and task metrics.

All neighbour computations use Euclidean distance with ties broken by the
lower row index, which makes trustworthiness reproducible across platforms.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.stats import rankdata

from .errors import InvalidArgument, UndefinedCorrelation, UndefinedMetric

DEFAULT_NEIGHBORS = 10


def _sqdist(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return cdist(X, X, "sqeuclidean")


def neighbor_order(X: np.ndarray) -> np.ndarray:
    """Row ``i`` lists all points by increasing distance to ``i``; ``i`` itself comes first."""
    d = _sqdist(X)
    np.fill_diagonal(d, -np.inf)
    return np.argsort(d, axis=1, kind="stable")


def trustworthiness(X_high: np.ndarray, X_low: np.ndarray, n_neighbors: int = DEFAULT_NEIGHBORS) -> float:
    n = len(X_high)
    if len(X_low) != n:
        raise InvalidArgument("X_high and X_low must have the same number of rows")
    K = int(n_neighbors)
    if not 1 <= K <= n - 2:
        raise InvalidArgument(f"n_neighbors={K} outside [1, {n - 2}]")
    order_high = neighbor_order(X_high)
    rank_high = np.empty_like(order_high)
    rows = np.arange(n)[:, None]
    rank_high[rows, order_high] = np.arange(n)[None, :]
    low_nbrs = neighbor_order(X_low)[:, 1 : K + 1]
    r = rank_high[rows, low_nbrs]
    penalty = np.where(r > K, r - K, 0).sum()
    # normalizer = worst attainable penalty; the usual K(2n-3K-1) form only holds for K < n/2
    worst = n * K * (2 * n - 3 * K - 1) if K < n / 2 else n * (n - K) * (n - K - 1)
    return float(1.0 - 2.0 / worst * penalty)


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InvalidArgument(f"length mismatch {a.shape} vs {b.shape}")
    if len(a) < 3:
        raise InvalidArgument("spearman needs at least 3 observations")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidArgument("spearman inputs must be finite")
    return pearson(rankdata(a), rankdata(b))


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    scale = max(1.0, np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
    if na <= 1e-12 * scale * np.sqrt(len(a)) or nb <= 1e-12 * scale * np.sqrt(len(b)):
        raise UndefinedCorrelation("zero variance input")
    # a.b / sqrt(a.a * b.b) gives exactly +-1 for b = +-a
    return float(np.clip((a @ b) / np.sqrt((a @ a) * (b @ b)), -1.0, 1.0))


def pair_index(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(n, 1)


def pair_confounds(*labels: Sequence) -> np.ndarray:
    """Same-label indicator per ``i < j`` pair for each categorical column (one column each)."""
    cols = []
    for lab in labels:
        lab = np.asarray(lab)
        i, j = pair_index(len(lab))
        cols.append((lab[i] == lab[j]).astype(np.float64))
    return np.column_stack(cols) if cols else np.zeros((0, 0))


def residualize(y: np.ndarray, design: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    X = np.column_stack([np.ones(len(y)), np.asarray(design, dtype=np.float64).reshape(len(y), -1)])
    coef = np.linalg.pinv(X) @ y
    return y - X @ coef


def residualized_correlation(pred_d: np.ndarray, target_d: np.ndarray, confounds: np.ndarray) -> float:
    """Spearman of pair distances after regressing confound indicators out of both."""
    pred_d = np.asarray(pred_d, dtype=np.float64)
    if len(pred_d) < 3:
        raise InvalidArgument("need at least 3 pairs")
    target_d = np.asarray(target_d, dtype=np.float64)
    rp, rt = residualize(pred_d, confounds), residualize(target_d, confounds)
    for raw, res, name in ((pred_d, rp, "prediction"), (target_d, rt, "target")):
        spread = np.linalg.norm(raw - raw.mean())
        if np.linalg.norm(res) <= 1e-10 * max(spread, 1e-300):
            raise UndefinedCorrelation(f"confounds explain the {name} completely")
    return spearman(rp, rt)


def _binary(labels) -> np.ndarray:
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) != 2:
        raise UndefinedMetric(f"AUROC needs exactly two classes, got {len(uniq)}")
    if labels.dtype == bool or set(uniq.tolist()) <= {0, 1}:
        return labels.astype(bool)
    return labels == uniq[1]


def auroc(scores: np.ndarray, labels) -> float:
    """Mann-Whitney AUROC with ties counted one half; positive class = larger label."""
    pos = _binary(labels)
    scores = np.asarray(scores, dtype=np.float64)
    ranks2 = (2 * rankdata(scores)).astype(np.int64)
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    u2 = int(ranks2[pos].sum()) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def auroc_abs(scores: np.ndarray, labels) -> float:
    a = auroc(scores, labels)
    return max(a, 1.0 - a)


def balanced_accuracy(pred, true) -> float:
    pred, true = np.asarray(pred), np.asarray(true)
    recalls = [np.mean(pred[true == c] == c) for c in np.unique(true)]
    return float(np.mean(recalls))


def macro_f1(pred, true) -> float:
    pred, true = np.asarray(pred), np.asarray(true)
    scores = []
    for c in np.unique(np.concatenate([pred, true])):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if tp == 0 else 2 * tp / denom)
    return float(np.mean(scores))


def silhouette_mean(Z: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    classes, inv, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if len(classes) < 2:
        raise UndefinedMetric("silhouette needs at least two clusters")
    if counts.max() < 2:
        return 0.0  # every point is its own cluster: silhouette is 0 by convention
    D = np.sqrt(_sqdist(Z))
    onehot = np.zeros((len(labels), len(classes)))
    onehot[np.arange(len(labels)), inv] = 1.0
    sums = D @ onehot
    own = counts[inv]
    a = sums[np.arange(len(labels)), inv] / np.maximum(own - 1, 1)
    mean_other = sums / counts[None, :]
    mean_other[np.arange(len(labels)), inv] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def eta_squared(values, groups) -> float:
    values = np.asarray(values, dtype=np.float64)
    groups = np.asarray(groups)
    _, inv = np.unique(groups, return_inverse=True)
    if inv.max() < 1:
        raise UndefinedMetric("eta squared needs at least two groups")
    centered = values - values.mean()
    ss_total = centered @ centered
    if ss_total <= 1e-24 * max(1.0, np.abs(values).max()) ** 2 * len(values):
        raise UndefinedMetric("zero total variance")
    sums = np.bincount(inv, weights=centered)
    counts = np.bincount(inv)
    ss_between = np.sum(sums**2 / counts)
    return float(min(1.0, ss_between / ss_total))


def ss_within(values, groups) -> float:
    values = np.asarray(values, dtype=np.float64)
    _, inv = np.unique(np.asarray(groups), return_inverse=True)
    means = np.bincount(inv, weights=values) / np.bincount(inv)
    r = values - means[inv]
    return float(r @ r)


def orientation_summary(rhos) -> tuple[float, float, float]:
    """``(mean signed rho, mean |rho|, share of positive rho)``."""
    rhos = np.asarray(rhos, dtype=np.float64)
    if rhos.size == 0:
        raise InvalidArgument("orientation summary of an empty set")
    return float(rhos.mean()), float(np.abs(rhos).mean()), float(np.mean(rhos > 0))


def pairwise_upper(X: np.ndarray) -> np.ndarray:
    """Condensed Euclidean distances in ``triu_indices`` order."""
    return pdist(np.asarray(X, dtype=np.float64))
