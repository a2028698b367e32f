"""Permutation, rank and resampling statistics.

Conventions
-----------
- Permutation p-values use the add-one rule ``(1 + #{null >= obs}) / (1 + n_perm)``,
  so 1999 permutations give a floor of 0.0005.
- Wilcoxon signed-rank drops zero differences (Pratt exclusion) and is exact
  (midrank-aware) for up to 25 non-zero differences.
- Bootstrap replicates are drawn from a generator keyed on ``(seed, n, n_boot)``
  and applied to the values in sorted order, so a symmetric statistic gives the
  same interval however the input was ordered.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.stats import norm, rankdata

from .errors import InsufficientData, InvalidArgument, NumericalError, UndefinedMetric, UndefinedTest

DEFAULT_N_PERM = 1999
EXACT_MAX_N = 25


def block_permutation(blocks: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Index permutation that only shuffles rows sharing a block label."""
    blocks = np.asarray(blocks)
    perm = np.arange(len(blocks))
    for members in _block_members(blocks):
        perm[members] = members[rng.permutation(len(members))]
    return perm


def _block_members(blocks: np.ndarray) -> list[np.ndarray]:
    _, inv = np.unique(blocks, return_inverse=True, axis=0) if blocks.ndim > 1 else np.unique(blocks, return_inverse=True)
    inv = np.asarray(inv).ravel()
    order = np.argsort(inv, kind="stable")
    splits = np.flatnonzero(np.diff(inv[order])) + 1
    return [g for g in np.split(order, splits) if len(g) > 1]


def blocked_permutation_p(observed: float, recompute: Callable[[np.ndarray], float], blocks,
                          n_perm: int = DEFAULT_N_PERM, seed: int = 0,
                          return_null: bool = False):
    """One-sided (larger is more extreme) permutation p-value.

    ``recompute`` receives an index permutation ``perm`` (labels of row ``i``
    become those of row ``perm[i]``) and returns the statistic under it.
    """
    if n_perm < 1:
        raise InvalidArgument("n_perm must be >= 1")
    blocks = np.asarray(blocks)
    members = _block_members(blocks)
    if not members:
        raise InvalidArgument("no block contains two or more items; nothing to permute")
    if not np.isfinite(observed):
        raise NumericalError("observed statistic is not finite")
    rng = np.random.default_rng(seed)
    null = np.empty(n_perm)
    base = np.arange(len(blocks))
    for b in range(n_perm):
        perm = base.copy()
        for m in members:
            perm[m] = m[rng.permutation(len(m))]
        val = recompute(perm)
        if not np.isfinite(val):
            raise NumericalError(f"permutation {b} produced a non-finite statistic")
        null[b] = val
    p = (1.0 + np.sum(null >= observed)) / (1.0 + n_perm)
    return (float(p), null) if return_null else float(p)


def _signed_ranks(diffs) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(diffs, dtype=np.float64).ravel()
    if not np.all(np.isfinite(d)):
        raise InvalidArgument("differences must be finite")
    d = d[d != 0]
    if d.size == 0:
        raise UndefinedTest("all differences are zero")
    ranks2 = np.rint(2 * rankdata(np.abs(d))).astype(np.int64)
    return d, ranks2


def exact_signed_rank_counts(ranks2: np.ndarray) -> np.ndarray:
    """``counts[t]`` = number of sign patterns whose doubled positive-rank sum is ``t``."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in ranks2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(diffs, min_n: int = 5) -> tuple[float, float]:
    """Two-sided Wilcoxon signed-rank test on paired differences.

    Returns ``(T+, p)`` where ``T+`` is the sum of midranks of positive
    differences.  Exact for n <= 25, otherwise a normal approximation with
    tie and continuity correction.
    """
    d, ranks2 = _signed_ranks(diffs)
    n = d.size
    if n < min_n:
        raise InsufficientData(f"{n} non-zero differences; need at least {min_n}")
    t2 = int(ranks2[d > 0].sum())
    if n <= EXACT_MAX_N:
        counts = exact_signed_rank_counts(ranks2)
        total = counts.sum()
        lower = counts[: t2 + 1].sum() / total
        upper = counts[t2:].sum() / total
        p = min(1.0, 2.0 * min(lower, upper))
        return t2 / 2.0, float(p)
    t = t2 / 2.0
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks2, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    dev = max(abs(t - mean) - 0.5, 0.0)
    p = 2.0 * norm.sf(dev / np.sqrt(var))
    return t, float(min(1.0, p))


def bh_fdr(pvals) -> np.ndarray:
    p = np.asarray(pvals, dtype=np.float64).ravel()
    if np.any((p < 0) | (p > 1)):
        raise InvalidArgument("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return p
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    q_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    q = np.empty(m)
    q[order] = np.clip(q_sorted, 0.0, 1.0)
    return q


def bootstrap_ci(values, statistic: Callable[[np.ndarray], float] = np.mean, n_boot: int = 2000,
                 level: float = 0.95, seed: int = 0) -> tuple[float, float, float]:
    """Percentile bootstrap; returns ``(mean of replicates, lo, hi)``."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    if n < 2:
        raise InvalidArgument("bootstrap needs at least two values")
    if v.ndim == 1:
        v = np.sort(v)
    else:
        v = v[np.lexsort(v.reshape(n, -1).T[::-1])]
    rng = np.random.default_rng([int(seed), n, int(n_boot)])
    idx = rng.integers(0, n, size=(n_boot, n))
    reps = np.array([statistic(v[i]) for i in idx], dtype=np.float64)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(reps, [alpha, 1.0 - alpha])
    return float(reps.mean()), float(lo), float(hi)


def knn_weights(coords: np.ndarray, n_neighbors: int) -> np.ndarray:
    """Row-standardized kNN weight matrix (self excluded, ties to lower index)."""
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    k = min(int(n_neighbors), n - 1)
    d = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    nbrs = np.argsort(d, axis=1, kind="stable")[:, :k]
    W = np.zeros((n, n))
    W[np.arange(n)[:, None], nbrs] = 1.0 / k
    return W


def morans_i(values, coords, n_neighbors: int = 8, n_perm: int = 999, seed: int = 0) -> tuple[float, float]:
    """Moran's I with row-standardized kNN weights and a one-sided permutation p."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    if n < 10:
        raise InvalidArgument("Moran's I needs at least 10 points")
    c = v - v.mean()
    denom = c @ c
    if denom <= 1e-24 * max(1.0, np.abs(v).max()) ** 2 * n:
        raise UndefinedMetric("zero variance values")
    W = knn_weights(coords, n_neighbors)
    scale = n / W.sum()
    obs = scale * (c @ W @ c) / denom
    rng = np.random.default_rng(seed)
    perms = np.array([c[rng.permutation(n)] for _ in range(n_perm)])
    null = scale * np.einsum("bi,ij,bj->b", perms, W, perms) / denom
    p = (1.0 + np.sum(null >= obs)) / (1.0 + n_perm)
    return float(obs), float(p)


def paired_summary(a: Sequence[float], b: Sequence[float]) -> dict:
    """Mean difference and Wilcoxon on the pairs where both values are finite."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ok = np.isfinite(a) & np.isfinite(b)
    diffs = a[ok] - b[ok]
    out = {"n_pairs": int(ok.sum()), "mean_delta": float(diffs.mean()) if ok.any() else float("nan"),
           "statistic": float("nan"), "p": float("nan")}
    try:
        out["statistic"], out["p"] = wilcoxon_signed_rank(diffs)
    except UndefinedTest:
        out["p"] = 1.0
    except InsufficientData:
        pass
    return out
