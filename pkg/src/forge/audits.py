"""Geometric audits of a latent space.

- flatness / ripple: plane fit, Moran's I of plane residuals, and a
  sinusoid scan over in-plane directions after quadratic detrending;
- separation lens: swap one display axis for a regularized discriminant;
- latent interventions: move anchors along a centroid direction and decode;
- branch topology: MST over stage centroids;
- dimension-wise audit and a ridge composite temporal axis.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import networkx as nx
import numpy as np

from . import metrics, stats
from .errors import (DegenerateAxis, DegenerateGeometry, InvalidArgument, NumericalError,
                     UndefinedCorrelation, UndefinedMetric, UndefinedTask)
from .let import PINV_CUTOFF, LetHead

THETAS_DEG = np.arange(0, 180, 10)
FREQS = np.geomspace(0.5, 8.0, 32)  # cycles per span
RIPPLE_RULE = {"q": 0.05, "r2": 0.10, "cycles": 1.5}


# ---------------------------------------------------------------------------
# ripple machinery


def _quad_design(P: np.ndarray) -> np.ndarray:
    p1, p2 = P[:, 0], P[:, 1]
    return np.column_stack([np.ones(len(P)), p1, p2, p1 * p1, p1 * p2, p2 * p2])


def _detrend_projector(P: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Matrix mapping residuals to residuals-after-quadratic-fit (weighted least squares)."""
    A = _quad_design(P)
    w = np.ones(len(P)) if weights is None else weights
    Aw = A * w[:, None]
    H = A @ np.linalg.pinv(A.T @ Aw) @ Aw.T
    return np.eye(len(P)) - H


class SinusoidScan:
    """Precomputed orthonormal sinusoid bases over an in-plane (direction, frequency) grid."""

    def __init__(self, P: np.ndarray, thetas_deg=THETAS_DEG, freqs=FREQS):
        self.grid = [(float(t), float(f)) for t in thetas_deg for f in freqs]
        n = len(P)
        blocks = []
        for t in thetas_deg:
            th = np.deg2rad(t)
            proj = P[:, 0] * np.cos(th) + P[:, 1] * np.sin(th)
            lo, span = proj.min(), np.ptp(proj)
            if span <= 0:
                raise DegenerateGeometry("in-plane coordinates have zero span")
            phase = 2 * np.pi * np.outer((proj - lo) / span, freqs)  # n x F
            for j in range(len(freqs)):
                B = np.column_stack([np.cos(phase[:, j]), np.sin(phase[:, j])])
                B -= B.mean(axis=0)
                Q, R = np.linalg.qr(B)
                Q = Q[:, np.abs(np.diag(R)) > 1e-10 * np.sqrt(n)]
                if Q.shape[1] < 2:
                    Q = np.column_stack([Q, np.zeros((n, 2 - Q.shape[1]))])
                blocks.append(Q)
        self.Q = np.concatenate(blocks, axis=1)  # n x 2G

    def r2(self, R: np.ndarray) -> np.ndarray:
        """Per-grid-point R^2 for each column of ``R`` (grid x columns)."""
        R = np.atleast_2d(R.T).T
        R = R - R.mean(axis=0)
        tot = np.sum(R * R, axis=0)
        C = self.Q.T @ R
        explained = (C[0::2] ** 2 + C[1::2] ** 2)
        return explained / np.where(tot > 0, tot, np.inf)

    def best(self, r: np.ndarray) -> tuple[float, float, float]:
        vals = self.r2(r[:, None])[:, 0]
        i = int(np.argmax(vals))
        theta, freq = self.grid[i]
        return float(vals[i]), theta, freq


def _ripple_test(P: np.ndarray, resid: np.ndarray, n_perm: int, seed: int,
                 weights: np.ndarray | None = None) -> dict:
    """Best detrended sinusoid fit of ``resid`` over plane coords ``P`` and its permutation p."""
    T = _detrend_projector(P, weights)
    scan = SinusoidScan(P)
    detr = T @ resid
    if np.sum(detr**2) <= 1e-24 * max(1.0, np.sum(resid**2)):
        return {"r2": 0.0, "theta": float("nan"), "cycles": float("nan"), "p": 1.0}
    r2, theta, cycles = scan.best(detr)
    rng = np.random.default_rng(seed)
    null = np.empty(n_perm)
    chunk = 250
    for s in range(0, n_perm, chunk):
        m = min(chunk, n_perm - s)
        perms = np.column_stack([resid[rng.permutation(len(resid))] for _ in range(m)])
        null[s : s + m] = scan.r2(T @ perms).max(axis=0)
    p = (1.0 + np.sum(null >= r2)) / (1.0 + n_perm)
    return {"r2": r2, "theta": theta, "cycles": cycles, "p": float(p)}


@dataclass(frozen=True)
class FlatnessReport:
    plane_var_fraction: float
    moran_i: float
    moran_p: float
    sinusoid_r2: float
    sinusoid_theta: float
    sinusoid_cycles: float
    sinusoid_p: float


def weighted_pca(X: np.ndarray, weights: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(mean, eigenvalues desc, eigenvectors as columns)`` of the weighted covariance."""
    X = np.asarray(X, dtype=np.float64)
    w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise InvalidArgument("weights must be non-negative with a positive sum")
    w = w / w.sum()
    mu = w @ X
    C = (X - mu).T @ ((X - mu) * w[:, None])
    vals, vecs = np.linalg.eigh(C)
    order = np.argsort(-vals, kind="stable")
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    # deterministic sign: largest-|entry| of each axis positive
    sign = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])])
    return mu, vals, vecs * np.where(sign == 0, 1.0, sign)


def flatness_ripple_3d(coords: np.ndarray, weights: np.ndarray | None = None, n_perm: int = 999,
                       seed: int = 0, moran_neighbors: int = 8) -> FlatnessReport:
    X = np.asarray(coords, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 3:
        raise InvalidArgument("coords must be n x 3")
    if len(X) < 30:
        raise InvalidArgument("flatness audit needs at least 30 points")
    mu, vals, vecs = weighted_pca(X, weights)
    if vals[1] <= 1e-12 * max(vals[0], 1e-300):
        raise DegenerateGeometry("coordinates do not span a plane")
    plane_frac = float((vals[0] + vals[1]) / vals.sum())
    Y = X - mu
    P = Y @ vecs[:, :2]
    resid = Y @ vecs[:, 2]
    try:
        mi, mp = stats.morans_i(resid, P, n_neighbors=moran_neighbors, n_perm=n_perm, seed=seed)
    except UndefinedMetric:
        mi, mp = float("nan"), 1.0
    rip = _ripple_test(P, resid, n_perm, seed, weights)
    return FlatnessReport(plane_var_fraction=plane_frac, moran_i=mi, moran_p=mp, sinusoid_r2=rip["r2"],
                          sinusoid_theta=rip["theta"], sinusoid_cycles=rip["cycles"], sinusoid_p=rip["p"])


def latent_ripple_scan(Z: np.ndarray, n_substrate: int = 2, rule: Mapping = RIPPLE_RULE, n_perm: int = 999,
                       seed: int = 0) -> list[dict]:
    """Sinusoid test of every residual principal axis over the substrate PC1/PC2 plane.

    An axis is significant only if its BH q, best R^2 and cycles-per-span all
    meet ``rule``.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape[1] < 3:
        return []
    if n_substrate != 2:
        raise InvalidArgument("the substrate is the PC1/PC2 plane")
    mu, vals, vecs = weighted_pca(Z)
    S = (Z - mu) @ vecs
    P = S[:, :2]
    rows = []
    for j in range(2, Z.shape[1]):
        res = _ripple_test(P, S[:, j], n_perm, seed + j)
        rows.append({"axis": j + 1, "r2": res["r2"], "theta": res["theta"], "cycles": res["cycles"],
                     "p": res["p"], "variance": float(vals[j])})
    q = stats.bh_fdr([r["p"] for r in rows])
    for r, qv in zip(rows, q):
        r["q"] = float(qv)
        r["significant"] = bool(qv <= rule["q"] and r["r2"] >= rule["r2"]
                                and np.isfinite(r["cycles"]) and r["cycles"] >= rule["cycles"])
    return rows


# ---------------------------------------------------------------------------
# separation lens


@dataclass(frozen=True)
class LensResult:
    coords: np.ndarray
    axis: np.ndarray
    auroc_before: float
    auroc_after: float
    trustworthiness_before: float
    trustworthiness_after: float

    @property
    def trustworthiness_delta(self) -> float:
        return self.trustworthiness_after - self.trustworthiness_before


def ridge_discriminant(Z: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """``(S_w + lam I)^-1 (mu_1 - mu_0)`` with ``S_w`` the pooled within-class covariance."""
    y = np.asarray(y).astype(bool)
    if y.all() or not y.any():
        raise UndefinedTask("discriminant needs both classes")
    Z1, Z0 = Z[y], Z[~y]
    C = ((Z1 - Z1.mean(0)).T @ (Z1 - Z1.mean(0)) + (Z0 - Z0.mean(0)).T @ (Z0 - Z0.mean(0))) / len(Z)
    return np.linalg.solve(C + lam * np.eye(Z.shape[1]), Z1.mean(0) - Z0.mean(0))


def _display_auroc(D: np.ndarray, y: np.ndarray) -> float:
    # separability of a display: AUROC(abs) of a lightly regularized discriminant fitted in it
    w = ridge_discriminant(D, y, 1e-6 * max(1.0, float(np.trace(np.cov(D.T)))))
    return metrics.auroc_abs(D @ w, y)


def separation_lens(Z: np.ndarray, display3d: np.ndarray, labels, lam: float = 8.0, replace_axis: int = 2,
                    n_neighbors: int = 10) -> LensResult:
    Z = np.asarray(Z, dtype=np.float64)
    D = np.asarray(display3d, dtype=np.float64)
    y = np.asarray(labels)
    uniq = np.unique(y)
    if len(uniq) != 2:
        raise UndefinedTask("separation lens needs exactly two classes")
    y = y == uniq[1]
    w = ridge_discriminant(Z, y, lam)
    if np.linalg.norm(w) < 1e-10:
        raise DegenerateAxis("discriminant axis norm below 1e-10")
    score = (Z - Z.mean(0)) @ w
    sd = score.std()
    if sd < 1e-10 * max(1.0, np.abs(score).max()):
        raise DegenerateAxis("discriminant score has no variance")
    old = D[:, replace_axis]
    new = (score - score.mean()) / sd * old.std() + old.mean()
    L = D.copy()
    L[:, replace_axis] = new
    K = min(n_neighbors, len(Z) - 2)
    return LensResult(coords=L, axis=w, auroc_before=_display_auroc(D, y), auroc_after=_display_auroc(L, y),
                      trustworthiness_before=metrics.trustworthiness(Z, D, K),
                      trustworthiness_after=metrics.trustworthiness(Z, L, K))


# ---------------------------------------------------------------------------
# latent interventions


@dataclass(frozen=True)
class InterventionResult:
    t: np.ndarray
    target_fraction: np.ndarray
    mean_depth: np.ndarray
    rho: float
    p: float


def _centroid_table(X: np.ndarray, groups: np.ndarray):
    names = np.unique(groups)
    return names, np.array([X[groups == g].mean(axis=0) for g in names])


def latent_intervention(head: LetHead, X: np.ndarray, groups, from_group, to_group, source_group=None,
                        n_steps: int = 11, depth: Mapping | None = None, n_perm: int = 1999,
                        seed: int = 0, centroids: str = "reconstructed") -> InterventionResult:
    """Move source rows along ``mu_to - mu_from`` in latent space, decode, classify.

    Classification is nearest group centroid in feature space; ``depth``
    (group -> depth) adds the mean depth of the assigned groups per step.
    With ``centroids="reconstructed"`` the group centroids are taken over the
    decoded encodings ``decode(encode(x))``, so decoded points and centroids
    live in the same subspace; ``"raw"`` uses the input features directly.
    """
    if centroids not in ("reconstructed", "raw"):
        raise InvalidArgument(f"centroids must be 'reconstructed' or 'raw', got {centroids!r}")
    X = np.asarray(X, dtype=np.float64)
    groups = np.asarray(groups).astype(str)
    from_group, to_group = str(from_group), str(to_group)
    source_group = from_group if source_group is None else str(source_group)
    for g in (from_group, to_group, source_group):
        if not np.any(groups == g):
            raise InvalidArgument(f"group {g!r} has no rows")
    s = np.linalg.svd(head.W, compute_uv=False)
    if np.sum(s > PINV_CUTOFF * s.max()) < head.k:
        raise NumericalError("encoder is rank deficient; the decode map loses latent directions")
    Z = head.encode(X)
    direction = Z[groups == to_group].mean(0) - Z[groups == from_group].mean(0)
    names, cents = _centroid_table(head.decode(Z) if centroids == "reconstructed" else X, groups)
    z_src = Z[groups == source_group]
    ts = np.linspace(0.0, 1.0, n_steps)
    frac, mdepth = np.empty(n_steps), np.full(n_steps, np.nan)
    for i, t in enumerate(ts):
        dec = head.decode(z_src + t * direction)
        d2 = ((dec[:, None, :] - cents[None, :, :]) ** 2).sum(-1)
        assigned = names[np.argmin(d2, axis=1)]
        frac[i] = np.mean(assigned == to_group)
        if depth is not None:
            mdepth[i] = np.mean([depth[a] for a in assigned])
    try:
        rho = metrics.spearman(ts, frac)
    except UndefinedCorrelation:
        return InterventionResult(ts, frac, mdepth, float("nan"), 1.0)
    rng = np.random.default_rng(seed)
    rt = ts.argsort().argsort().astype(float)
    null = np.array([metrics.pearson(rt, _midranks(frac[rng.permutation(n_steps)])) for _ in range(n_perm)])
    p = (1.0 + np.sum(null >= rho - 1e-12)) / (1.0 + n_perm)
    return InterventionResult(ts, frac, mdepth, rho, float(p))


def _midranks(v):
    from scipy.stats import rankdata

    return rankdata(v)


# ---------------------------------------------------------------------------
# branch topology


@dataclass(frozen=True)
class TopologyReport:
    root_degree: int
    branchpoints: int
    reachability: float
    reachability_knn: float
    first_hop_diversity: int
    fallback_complete: bool
    mst_edges: tuple


def branch_topology(Z: np.ndarray, stages, root: str, terminals: Sequence[str] | None = None,
                    branch_of: Mapping | None = None, k_nn: int = 4) -> TopologyReport:
    """MST over stage centroids restricted to mutual-kNN edges (complete graph if disconnected)."""
    Z = np.asarray(Z, dtype=np.float64)
    stages = np.asarray(stages).astype(str)
    names, C = _centroid_table(Z, stages)
    names = [str(n) for n in names]
    if len(names) < 3:
        raise InvalidArgument("topology needs at least three stages")
    if root not in names:
        raise InvalidArgument(f"stem stage {root!r} missing")
    m = len(names)
    D = np.sqrt(((C[:, None] - C[None]) ** 2).sum(-1))
    k = min(k_nn, m - 1)
    order = np.argsort(np.where(np.eye(m, dtype=bool), np.inf, D), axis=1, kind="stable")[:, :k]
    nn = np.zeros((m, m), dtype=bool)
    nn[np.arange(m)[:, None], order] = True
    mutual = nn & nn.T
    G = nx.Graph()
    G.add_nodes_from(names)
    for i in range(m):
        for j in range(i + 1, m):
            if mutual[i, j]:
                G.add_edge(names[i], names[j], weight=float(D[i, j]))
    fallback = not nx.is_connected(G)
    knn_graph = G.copy()
    if fallback:
        G = nx.Graph()
        G.add_nodes_from(names)
        for i in range(m):
            for j in range(i + 1, m):
                G.add_edge(names[i], names[j], weight=float(D[i, j]))
    T = nx.minimum_spanning_tree(G, weight="weight", algorithm="kruskal")
    if terminals is None:
        terminals = [n for n in names if n != root and T.degree(n) == 1]
    terminals = [t for t in terminals if t in names]
    reach = float(np.mean([nx.has_path(T, root, t) for t in terminals])) if terminals else 1.0
    reach_knn = float(np.mean([nx.has_path(knn_graph, root, t) for t in terminals])) if terminals else 1.0
    nbrs = sorted(T.neighbors(root))
    diversity = len({(branch_of or {}).get(n, n) for n in nbrs})
    edges = tuple(sorted(tuple(sorted(e)) for e in T.edges()))
    return TopologyReport(root_degree=int(T.degree(root)),
                          branchpoints=int(sum(1 for n in T.nodes if T.degree(n) >= 3)),
                          reachability=reach, reachability_knn=reach_knn, first_hop_diversity=diversity,
                          fallback_complete=fallback, mst_edges=edges)


# ---------------------------------------------------------------------------
# dimension audit and composite axis


def dimension_audit(Z: np.ndarray, stage=None, branch=None, depth=None,
                    binary: Mapping[str, tuple[np.ndarray, np.ndarray]] | None = None) -> dict:
    """Per-axis eta^2 (stage, branch), AUROC(abs) per binary task and |rho| to depth.

    ``binary`` maps a task name to ``(row_mask, positive)`` arrays.
    """
    Z = np.asarray(Z, dtype=np.float64)
    k = Z.shape[1]
    if k < 2:
        raise InvalidArgument("dimension audit needs at least two axes")
    rows = []
    for j in range(k):
        v = Z[:, j]
        row = {"axis": j}
        for name, lab in (("eta2_stage", stage), ("eta2_branch", branch)):
            if lab is not None:
                try:
                    row[name] = metrics.eta_squared(v, lab)
                except UndefinedMetric:
                    row[name] = float("nan")
        if depth is not None:
            try:
                row["abs_rho_depth"] = abs(metrics.spearman(v, depth))
            except UndefinedCorrelation:
                row["abs_rho_depth"] = float("nan")
        for name, (mask, pos) in (binary or {}).items():
            mask = np.asarray(mask, dtype=bool)
            try:
                row[f"auroc_{name}"] = metrics.auroc_abs(v[mask], np.asarray(pos)[mask])
            except UndefinedMetric:
                row[f"auroc_{name}"] = float("nan")
        rows.append(row)
    Cm = np.corrcoef(Z.T)
    off = np.abs(Cm[~np.eye(k, dtype=bool)])
    return {"axes": rows, "offdiag_abs_corr": float(np.nanmean(off))}


@dataclass(frozen=True)
class CompositeAxis:
    weights: np.ndarray
    rho_composite: float
    rho_depth: float
    p: float


def composite_axis(Z: np.ndarray, targets: np.ndarray, depth, blocks=None, lam: float = 1.0,
                   n_perm: int = 1999, seed: int = 0) -> CompositeAxis:
    """Ridge axis over ``Z`` for the mean of standardized temporal components.

    The permutation p is one-sided for ``spearman(axis, depth)``, with depth
    shuffled within ``blocks`` (a single block when omitted).
    """
    Z = np.asarray(Z, dtype=np.float64)
    T = np.asarray(targets, dtype=np.float64).reshape(len(Z), -1)
    if np.any(np.abs(T.mean(0)) > 1e-8) or np.any(np.abs(T.std(0) - 1.0) > 1e-8):
        raise InvalidArgument("targets must be standardized (zero mean, unit variance)")
    depth = np.asarray(depth, dtype=np.float64)
    comp = T.mean(axis=1)
    Zc = Z - Z.mean(0)
    w = np.linalg.solve(Zc.T @ Zc + lam * np.eye(Z.shape[1]), Zc.T @ comp)
    axis = Zc @ w

    def rho(a, b):
        try:
            return metrics.spearman(a, b)
        except UndefinedCorrelation:
            return float("nan")

    r_comp, r_depth = rho(axis, comp), rho(axis, depth)
    if not np.isfinite(r_depth):
        return CompositeAxis(w, r_comp, r_depth, 1.0)
    blocks = np.zeros(len(Z)) if blocks is None else np.asarray(blocks)
    from scipy.stats import rankdata

    ra = rankdata(axis)
    rd = rankdata(depth)
    p = stats.blocked_permutation_p(r_depth, lambda perm: metrics.pearson(ra, rd[perm]), blocks,
                                    n_perm=n_perm, seed=seed)
    return CompositeAxis(w, r_comp, r_depth, p)
