"""Latent Embedding Transfer adaptor: objectives, training, gating and transfer.

A head maps fixed features ``x`` to ``z = W_enc (x - b)`` and predicts pair
distances as ``beta * arccos(cos(z_i, z_j))``.  Three training variants share
the same parameterization:

- ``anchor``: distance fit to ``d_target`` plus the reconstruction term
  ``alpha * ||W_enc^+ z + b - x||^2``.
- ``cell``: stage-balanced minibatches; stage-centroid distance fit, a soft
  neighbourhood-preservation term, reconstruction and a jointly trained linear
  stage classifier on the unit-normalized latent (discarded after training).
- ``hybrid``: the cell loss plus stage-centroid topology matching against a
  reference head and a within-stage compactness penalty.

All gradients are analytic; ``beta`` is optimized through ``log beta``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy.spatial.distance import cdist

from . import container, metrics, stats
from .errors import (DegenerateLatent, DivergenceError, InsufficientData, InvalidArgument,
                     ShapeError, UndefinedCorrelation)
from .panel import Panel

CLIP = 1.0 - 1e-12
PINV_CUTOFF = 1e-10
LOCAL_TAU = 0.1
LOCAL_K = 10
CELL_DEFAULTS = {"w_stage": 1.0, "w_local": 0.1, "w_recon": 0.08, "w_cls": 0.4}
STRONG_SWEEP = {"lambda_topo": (0.04, 0.08, 0.12, 0.18), "lambda_compact": 0.015}
CONSERVATIVE_SWEEP = {"lambda_topo": (0.005, 0.01, 0.02, 0.03), "lambda_compact": 0.0}


def latent_distance(z_i, z_j, beta: float = 1.0) -> float:
    z_i = np.asarray(z_i, dtype=np.float64)
    z_j = np.asarray(z_j, dtype=np.float64)
    ni, nj = np.linalg.norm(z_i), np.linalg.norm(z_j)
    if ni < 1e-12 or nj < 1e-12:
        raise DegenerateLatent("latent vector with norm below 1e-12")
    c = np.clip((z_i @ z_j) / (ni * nj), -1.0, 1.0)
    return float(beta * np.arccos(c))


def latent_distances(Z: np.ndarray, beta: float) -> np.ndarray:
    """Full ``n x n`` matrix of ``beta * arccos`` latent distances."""
    U = _unit(Z)
    return beta * np.arccos(np.clip(U @ U.T, -1.0, 1.0)) * (1 - np.eye(len(Z)))


def _unit(Z: np.ndarray) -> np.ndarray:
    r = np.linalg.norm(Z, axis=1)
    if np.any(r < 1e-12):
        raise DegenerateLatent(f"{int(np.sum(r < 1e-12))} latent rows with norm below 1e-12")
    return Z / r[:, None]


# ---------------------------------------------------------------------------
# loss terms; each returns (value, grads) with grads w.r.t. its direct inputs


def _unit_backward(Z: np.ndarray, U: np.ndarray, gU: np.ndarray) -> np.ndarray:
    r = np.linalg.norm(Z, axis=1, keepdims=True)
    return (gU - np.sum(gU * U, axis=1, keepdims=True) * U) / r


def distance_term(Z: np.ndarray, target: np.ndarray, log_beta: float,
                  weights: np.ndarray | None = None) -> tuple[float, np.ndarray, float]:
    """``sum_{i<j} w_ij (beta*arccos(cos_ij) - t_ij)^2`` with gradients for Z and log beta."""
    beta = np.exp(log_beta)
    U = _unit(Z)
    C = U @ U.T
    inside = np.abs(C) < CLIP
    Cc = np.clip(C, -CLIP, CLIP)
    Dh = beta * np.arccos(Cc)
    R = Dh - target
    np.fill_diagonal(R, 0.0)
    WR = R if weights is None else R * weights
    value = 0.5 * np.sum(WR * R)
    G = WR * (-beta / np.sqrt(1.0 - Cc * Cc)) * inside
    gZ = _unit_backward(Z, U, 2.0 * G @ U)
    g_logbeta = float(np.sum(WR * Dh))
    return float(value), gZ, g_logbeta


def recon_term(W: np.ndarray, b: np.ndarray, X: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """``sum_i ||W^+ W (x_i - b) + b - x_i||^2`` with gradients for W and b."""
    Y = X - b
    Uw, s, Vt = np.linalg.svd(W, full_matrices=False)
    keep = s > PINV_CUTOFF * s.max()
    Uw, s, Vt = Uw[:, keep], s[keep], Vt[keep]
    R = Y - (Y @ Vt.T) @ Vt
    value = float(np.sum(R * R))
    pinv = Vt.T @ (Uw / s).T  # D x k
    V = Y @ pinv
    gW = -2.0 * V.T @ R
    gb = -2.0 * R.sum(axis=0)
    return value, gW, gb


def _centroids(Z: np.ndarray, groups: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    uniq, inv = np.unique(groups, return_inverse=True)
    counts = np.bincount(inv).astype(np.float64)
    M = np.zeros((len(uniq), Z.shape[1]))
    np.add.at(M, inv, Z)
    return M / counts[:, None], inv, counts


def centroid_distance_term(Z, groups, target_of: Callable[[np.ndarray], np.ndarray], log_beta,
                           select: np.ndarray | None = None):
    """Distance fit between group centroids; ``target_of(names)`` gives the target matrix."""
    uniq = np.unique(groups)
    M, inv, counts = _centroids(Z, groups)
    names = uniq
    if select is not None:
        mask = np.isin(uniq, select)
        M_sel = M[mask]
        names = uniq[mask]
    else:
        mask = np.ones(len(uniq), dtype=bool)
        M_sel = M
    if len(names) < 2:
        return 0.0, np.zeros_like(Z), 0.0
    value, gM_sel, g_lb = distance_term(M_sel, target_of(names), log_beta)
    gM = np.zeros_like(M)
    gM[mask] = gM_sel
    gZ = gM[inv] / counts[inv][:, None]
    return value, gZ, g_lb


def soft_local_term(Z: np.ndarray, neighbor_mask: np.ndarray, tau: float = LOCAL_TAU):
    """``1 - mean_i sum_{j in N_i} p_ij`` with ``p_i = softmax_j(cos_ij / tau)``, ``j != i``.

    ``N_i`` are the feature-space nearest neighbours of ``i`` (fixed), so the
    term is a differentiable version of one minus the kNN overlap fraction.
    """
    n = len(Z)
    U = _unit(Z)
    S = U @ U.T
    logits = S / tau
    np.fill_diagonal(logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    P = np.exp(logits)
    P /= P.sum(axis=1, keepdims=True)
    m = neighbor_mask.astype(np.float64)
    overlap = np.sum(P * m, axis=1)
    value = 1.0 - overlap.mean()
    gS = -(P * (m - overlap[:, None])) / (n * tau)
    gU = (gS + gS.T) @ U
    return float(value), _unit_backward(Z, U, gU)


def compact_term(Z: np.ndarray, groups: np.ndarray):
    """``sum_s mean_{i in s} ||u_i - mean_s(u)||^2`` on unit-normalized latents."""
    U = _unit(Z)
    M, inv, counts = _centroids(U, groups)
    D = U - M[inv]
    value = float(np.sum(np.sum(D * D, axis=1) / counts[inv]))
    gU = 2.0 * D / counts[inv][:, None]
    return value, _unit_backward(Z, U, gU)


def classifier_term(Z: np.ndarray, y: np.ndarray, Wc: np.ndarray, c: np.ndarray):
    """Mean softmax cross-entropy of ``u @ Wc + c`` (``u`` = unit latent)."""
    U = _unit(Z)
    logits = U @ Wc + c
    logits = logits - logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    n = len(Z)
    value = -float(np.mean(logp[np.arange(n), y]))
    P = np.exp(logp)
    P[np.arange(n), y] -= 1.0
    P /= n
    return value, _unit_backward(Z, U, P @ Wc.T), U.T @ P, P.sum(axis=0)


def feature_knn_mask(X: np.ndarray, k: int = LOCAL_K) -> np.ndarray:
    n = len(X)
    k = min(k, n - 1)
    d = cdist(X, X, "sqeuclidean")
    np.fill_diagonal(d, np.inf)
    nbrs = np.argsort(d, axis=1, kind="stable")[:, :k]
    mask = np.zeros((n, n), dtype=bool)
    mask[np.arange(n)[:, None], nbrs] = True
    return mask


def knn_overlap(X: np.ndarray, Z: np.ndarray, k: int = LOCAL_K) -> float:
    """Hard kNN overlap fraction between feature and latent neighbourhoods (diagnostic)."""
    a = metrics.neighbor_order(X)[:, 1 : k + 1]
    b = metrics.neighbor_order(Z)[:, 1 : k + 1]
    return float(np.mean([len(set(r) & set(s)) / k for r, s in zip(a, b)]))


# ---------------------------------------------------------------------------
# objectives over a parameter dict {"W", "b", "log_beta", ["Wc", "c"]}


@dataclass
class Batch:
    X: np.ndarray
    stage: np.ndarray
    target: np.ndarray | None = None       # row x row targets (anchor objective)
    pair_weights: np.ndarray | None = None
    stage_target: Callable | None = None   # names -> stage x stage targets
    stage_code: np.ndarray | None = None   # integer class per row for the classifier
    neighbor_mask: np.ndarray | None = None
    ref_target: Callable | None = None     # names -> reference centroid distances
    ref_stages: np.ndarray | None = None


def anchor_loss(params: Mapping, batch: Batch, alpha: float):
    W, b, lb = params["W"], params["b"], params["log_beta"]
    Y = batch.X - b
    Z = Y @ W.T
    dist, gZ, g_lb = distance_term(Z, batch.target, lb, batch.pair_weights)
    grads = {"W": gZ.T @ Y, "b": -(gZ.sum(axis=0) @ W), "log_beta": g_lb}
    terms = {"distance": dist, "recon": 0.0}
    total = dist
    if alpha:
        rec, gW, gb = recon_term(W, b, batch.X)
        total += alpha * rec
        grads["W"] = grads["W"] + alpha * gW
        grads["b"] = grads["b"] + alpha * gb
        terms["recon"] = rec
    return total, grads, terms


def cell_loss(params: Mapping, batch: Batch, hyper: Mapping):
    W, b, lb = params["W"], params["b"], params["log_beta"]
    Y = batch.X - b
    Z = Y @ W.T
    n = len(Z)
    gZ = np.zeros_like(Z)
    g_lb = 0.0
    grads = {}
    terms = {}
    total = 0.0

    w = hyper.get("w_stage", 0.0)
    v, g, gl = centroid_distance_term(Z, batch.stage, batch.stage_target, lb)
    terms["stage"] = v
    total += w * v
    gZ += w * g
    g_lb += w * gl

    w = hyper.get("w_local", 0.0)
    if w:
        v, g = soft_local_term(Z, batch.neighbor_mask)
        terms["local"] = v
        total += w * v
        gZ += w * g

    w = hyper.get("w_cls", 0.0)
    if w:
        v, g, gWc, gc = classifier_term(Z, batch.stage_code, params["Wc"], params["c"])
        terms["cls"] = v
        total += w * v
        gZ += w * g
        grads["Wc"] = w * gWc
        grads["c"] = w * gc
    elif "Wc" in params:
        grads["Wc"] = np.zeros_like(params["Wc"])
        grads["c"] = np.zeros_like(params["c"])

    w = hyper.get("lambda_topo", 0.0)
    if w:
        v, g, gl = centroid_distance_term(Z, batch.stage, batch.ref_target, lb, select=batch.ref_stages)
        terms["topo"] = v
        total += w * v
        gZ += w * g
        g_lb += w * gl

    w = hyper.get("lambda_compact", 0.0)
    if w:
        v, g = compact_term(Z, batch.stage)
        terms["compact"] = v
        total += w * v
        gZ += w * g

    grads["W"] = gZ.T @ Y
    grads["b"] = -(gZ.sum(axis=0) @ W)
    grads["log_beta"] = g_lb

    w = hyper.get("w_recon", 0.0)
    if w:
        rec, gW, gb = recon_term(W, b, batch.X)
        terms["recon"] = rec / n
        total += w * rec / n
        grads["W"] = grads["W"] + w * gW / n
        grads["b"] = grads["b"] + w * gb / n
    return float(total), grads, terms


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-2
    steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init_scale: float = 1.0


class Adam:
    def __init__(self, params: Mapping, cfg: OptimizerConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
        self.v = {k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: Mapping) -> dict:
        c = self.cfg
        self.t += 1
        out = {}
        for k, p in params.items():
            g = np.asarray(grads[k], dtype=np.float64)
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            mhat = self.m[k] / (1 - c.beta1**self.t)
            vhat = self.v[k] / (1 - c.beta2**self.t)
            out[k] = p - c.lr * mhat / (np.sqrt(vhat) + c.eps)
        return out


def _init_params(D: int, k: int, X: np.ndarray, rng: np.random.Generator, scale: float) -> dict:
    return {"W": rng.standard_normal((k, D)) * (scale / np.sqrt(D)),
            "b": X.mean(axis=0).copy(),
            "log_beta": np.float64(0.0)}


def _finite(value: float, grads: Mapping) -> bool:
    return np.isfinite(value) and all(np.all(np.isfinite(g)) for g in grads.values())


# ---------------------------------------------------------------------------
# heads


@dataclass(frozen=True)
class GateThresholds:
    trustworthiness: float = 0.80
    corr: float = 0.20
    blocked_p: float = 0.001


@dataclass(frozen=True)
class GateReport:
    trustworthiness: float
    corr_random: float
    corr_donor: float
    corr_clade: float
    blocked_p: float
    passed: bool
    corr_all: float = float("nan")
    n_perm: int = stats.DEFAULT_N_PERM
    thresholds: GateThresholds = field(default_factory=GateThresholds)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "GateReport":
        d = dict(d)
        d["thresholds"] = GateThresholds(**d.get("thresholds", {}))
        for k in ("trustworthiness", "corr_random", "corr_donor", "corr_clade", "blocked_p", "corr_all"):
            if d.get(k) is None:
                d[k] = float("nan")
        return cls(**d)


def evaluate_gate(trust: float, corrs: tuple[float, float, float], blocked_p: float,
                  th: GateThresholds) -> bool:
    finite = np.all(np.isfinite(corrs)) and np.isfinite(trust) and np.isfinite(blocked_p)
    return bool(finite and trust >= th.trustworthiness and min(corrs) >= th.corr
                and blocked_p <= th.blocked_p)


@dataclass(frozen=True)
class LetHead:
    W: np.ndarray = field(repr=False)
    b: np.ndarray = field(repr=False)
    log_beta: float
    variant: str = "anchor"
    hyper: dict = field(default_factory=dict)
    seed: int = 0
    gate: GateReport | None = None
    frozen: bool = False
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64)
        b = np.array(self.b, dtype=np.float64)
        if W.ndim != 2 or b.shape != (W.shape[1],):
            raise ShapeError(f"W_enc {W.shape} and b {b.shape} disagree")
        if W.shape[0] < 2:
            raise InvalidArgument("latent dimension must be >= 2")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b)) and np.isfinite(self.log_beta)):
            raise InvalidArgument("head parameters must be finite")
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "log_beta", float(self.log_beta))

    @property
    def beta(self) -> float:
        return float(np.exp(self.log_beta))

    @property
    def k(self) -> int:
        return self.W.shape[0]

    @property
    def D(self) -> int:
        return self.W.shape[1]

    def encode(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.D:
            raise ShapeError(f"head expects {self.D} features, got shape {X.shape}")
        return (X - self.b) @ self.W.T

    def decode(self, Z: np.ndarray) -> np.ndarray:
        """``W_enc^+ z + b`` with the SVD cutoff used in training."""
        return np.asarray(Z, dtype=np.float64) @ pinv(self.W).T + self.b

    def distances(self, X: np.ndarray) -> np.ndarray:
        return latent_distances(self.encode(X), self.beta)

    def params(self) -> dict:
        return {"W": self.W.copy(), "b": self.b.copy(), "log_beta": np.float64(self.log_beta)}

    def freeze(self, gate: GateReport | None = None) -> "LetHead":
        return replace(self, gate=gate if gate is not None else self.gate, frozen=True)

    def to_bytes(self) -> bytes:
        meta = {"type": "let_head", "variant": self.variant, "k": self.k, "D": self.D,
                "beta": self.beta, "hyper": self.hyper, "seed": self.seed, "frozen": self.frozen,
                "gate": None if self.gate is None else self.gate.to_dict(),
                "provenance": self.provenance}
        return container.dumps(meta, {"W_enc": self.W, "b": self.b,
                                      "log_beta": np.array([self.log_beta])})

    def save(self, path: str | Path) -> str:
        blob = self.to_bytes()
        Path(path).write_bytes(blob)
        return container.digest(blob)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "LetHead":
        meta, arrays = container.loads(blob)
        if meta.get("type") != "let_head":
            raise container.ContainerError("container does not hold a LET head")
        gate = None if meta["gate"] is None else GateReport.from_dict(meta["gate"])
        return cls(W=arrays["W_enc"], b=arrays["b"], log_beta=float(arrays["log_beta"][0]),
                   variant=meta["variant"], hyper=meta["hyper"], seed=meta["seed"], gate=gate,
                   frozen=meta["frozen"], provenance=meta.get("provenance", {}))

    @classmethod
    def load(cls, path: str | Path) -> "LetHead":
        return cls.from_bytes(Path(path).read_bytes())


def pinv(W: np.ndarray) -> np.ndarray:
    U, s, Vt = np.linalg.svd(W, full_matrices=False)
    keep = s > PINV_CUTOFF * s.max()
    return Vt[keep].T @ (U[:, keep] / s[keep]).T


# ---------------------------------------------------------------------------
# training


def _optimize(loss_fn, params: dict, cfg: OptimizerConfig, steps: int, batches=None,
              trace: list | None = None) -> tuple[dict, float, float]:
    """Adam loop keeping the best-so-far parameters; returns (best, best_loss, init_loss)."""
    opt = Adam(params, cfg)
    best, best_loss, init_loss = params, np.inf, None
    for step in range(steps):
        batch = batches(step) if batches is not None else None
        value, grads, _ = loss_fn(params, batch)
        if not _finite(value, grads):
            raise DivergenceError("non-finite LET loss", step)
        if init_loss is None:
            init_loss = value
        if value < best_loss:
            best, best_loss = params, value
        if trace is not None:
            trace.append(best_loss)
        params = opt.step(params, grads)
    return best, best_loss, init_loss


def train_anchor_head(panel: Panel, k: int = 10, alpha: float = 1e-3, seed: int = 0,
                      opt: OptimizerConfig = OptimizerConfig(),
                      pair_weights: np.ndarray | None = None,
                      trace: list | None = None) -> LetHead:
    """Fit a head to ``panel.d_target`` by full-batch Adam on the anchor objective.

    ``pair_weights`` (n x n, symmetric) masks pairs out of the distance term,
    which is how random pair holdouts are refit.
    """
    n = panel.n
    if k < 2:
        raise InvalidArgument("latent dimension must be >= 2")
    if n < k + 2:
        raise InvalidArgument(f"need at least k+2={k + 2} rows, got {n}")
    X = panel.features
    rng = np.random.default_rng(seed)
    params = _init_params(X.shape[1], k, X, rng, opt.init_scale)
    batch = Batch(X=X, stage=panel.stage, target=panel.d_target, pair_weights=pair_weights)

    def loss_fn(p, _):
        return anchor_loss(p, batch, alpha)

    best, best_loss, init_loss = _optimize(loss_fn, params, opt, opt.steps, trace=trace)
    _, _, terms = anchor_loss(best, batch, alpha)
    prov = {"loss": best_loss, "init_loss": init_loss, "distance_loss": terms["distance"],
            "recon_loss": terms["recon"], "n_rows": n, "steps": opt.steps, "lr": opt.lr}
    return LetHead(W=best["W"], b=best["b"], log_beta=float(best["log_beta"]), variant="anchor",
                   hyper={"alpha": alpha}, seed=seed, provenance=prov)


def stage_balanced_sample(stage: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    """At most ``cap`` rows per stage, drawn without replacement; sorted row indices."""
    rows = []
    for s in np.unique(stage):
        idx = np.flatnonzero(stage == s)
        if len(idx) > cap:
            idx = np.sort(rng.choice(idx, size=cap, replace=False))
        rows.append(idx)
    return np.sort(np.concatenate(rows))


def _cell_batches(panel: Panel, rows: np.ndarray, batch_size: int, seed: int, hyper: Mapping,
                  ref: tuple | None):
    stages = np.array(panel.ontology.names) if panel.ontology is not None else np.unique(panel.stage)
    code = {s: i for i, s in enumerate(stages)}
    n_batches = int(np.ceil(len(rows) / batch_size))
    rng = np.random.default_rng([seed, 1])
    cache = {}

    def stage_target(names):
        return panel.stage_distance(names)

    def get(step: int) -> Batch:
        epoch, j = divmod(step, n_batches)
        if epoch not in cache:
            cache.clear()
            cache[epoch] = rows[rng.permutation(len(rows))]
        order = cache[epoch]
        idx = np.sort(order[j * batch_size : (j + 1) * batch_size])
        X = panel.features[idx]
        st = panel.stage[idx]
        return Batch(X=X, stage=st, stage_target=stage_target,
                     stage_code=np.array([code[s] for s in st]),
                     neighbor_mask=feature_knn_mask(X) if hyper.get("w_local") else None,
                     ref_target=None if ref is None else ref[0],
                     ref_stages=None if ref is None else ref[1])

    return get, n_batches, len(stages)


def train_cell_head(cells: Panel, k: int = 10, weights: Mapping | None = None,
                    cap_per_stage: int = 500, epochs: int = 120, batch: int = 896, seed: int = 0,
                    opt: OptimizerConfig = OptimizerConfig(), _ref: tuple | None = None,
                    _extra_hyper: Mapping | None = None, trace: list | None = None) -> LetHead:
    """Stage-balanced minibatch training of the cell objective.

    The stage classifier is trained jointly and dropped from the returned head.
    """
    if cells.ontology is None:
        raise InvalidArgument("cell training needs a stage ontology")
    hyper = dict(CELL_DEFAULTS if weights is None else weights)
    hyper.update(_extra_hyper or {})
    rng = np.random.default_rng(seed)
    rows = stage_balanced_sample(cells.stage, cap_per_stage, rng)
    if batch > len(rows):
        raise InvalidArgument(f"batch {batch} larger than the {len(rows)} sampled cells")
    get, n_batches, n_classes = _cell_batches(cells, rows, batch, seed, hyper, _ref)
    X = cells.features[rows]
    params = _init_params(X.shape[1], k, X, rng, opt.init_scale)
    params["Wc"] = np.zeros((k, n_classes))
    params["c"] = np.zeros(n_classes)

    def loss_fn(p, b):
        return cell_loss(p, b, hyper)

    steps = epochs * n_batches
    # best-so-far tracking on minibatch losses would compare different batches; keep the last iterate
    opt_state = Adam(params, opt)
    init_loss = None
    for step in range(steps):
        value, grads, _ = loss_fn(params, get(step))
        if not _finite(value, grads):
            raise DivergenceError("non-finite cell loss", step)
        if init_loss is None:
            init_loss = value
        if trace is not None:
            trace.append(value)
        params = opt_state.step(params, grads)
    prov = {"init_loss": init_loss, "n_sampled": int(len(rows)), "epochs": epochs, "batch": batch,
            "cap_per_stage": cap_per_stage, "steps": steps, "lr": opt.lr}
    return LetHead(W=params["W"], b=params["b"], log_beta=float(params["log_beta"]),
                   variant="cell" if _ref is None else "hybrid", hyper=hyper, seed=seed,
                   provenance=prov)


def reference_topology(ref_head: LetHead, ref_panel: Panel) -> tuple[np.ndarray, np.ndarray]:
    """Stage names and centroid distance matrix of a reference head on its panel."""
    Z = ref_head.encode(ref_panel.features)
    M, _, _ = _centroids(Z, ref_panel.stage)
    names = np.unique(ref_panel.stage)
    return names, latent_distances(M, ref_head.beta)


def train_hybrid_head(cells: Panel, ref_head: LetHead, ref_panel: Panel, lambda_topo: float = 0.01,
                      lambda_compact: float = 0.0, **kwargs) -> LetHead:
    """Cell objective plus topology matching to ``ref_head`` and stage compactness."""
    if not ref_head.frozen:
        raise InvalidArgument("reference head must be gated/frozen")
    names, D_ref = reference_topology(ref_head, ref_panel)
    shared = np.intersect1d(names, np.unique(cells.stage))
    if len(shared) == 0:
        raise InvalidArgument("no stages shared between the cells and the reference panel")
    lookup = {s: i for i, s in enumerate(names)}

    def ref_target(sel):
        idx = [lookup[s] for s in sel]
        return D_ref[np.ix_(idx, idx)]

    extra = {"lambda_topo": float(lambda_topo), "lambda_compact": float(lambda_compact)}
    return train_cell_head(cells, _ref=(ref_target, shared), _extra_hyper=extra, **kwargs)


def hybrid_selection_score(rho_resid: float, auc_1: float, auc_2: float, silhouette: float,
                           spread: float) -> float:
    vals = (rho_resid, auc_1, auc_2, silhouette, spread)
    if any(v is None for v in vals):
        raise InvalidArgument("all five selection inputs are required")
    return rho_resid + 0.25 * auc_1 + 0.25 * auc_2 + 0.40 * silhouette - 0.20 * spread


# ---------------------------------------------------------------------------
# gating and transfer


@dataclass(frozen=True)
class GateSplits:
    random_fraction: float = 0.2
    donor_fraction: float = 0.2
    n_clades: int = 1
    n_neighbors: int = metrics.DEFAULT_NEIGHBORS


def _pairs_touching(rows_mask: np.ndarray) -> np.ndarray:
    i, j = np.triu_indices(len(rows_mask), 1)
    return rows_mask[i] | rows_mask[j]


def _holdout_masks(panel: Panel, splits: GateSplits, rng: np.random.Generator) -> dict:
    n = panel.n
    n_pairs = n * (n - 1) // 2
    out = {}
    held = np.zeros(n_pairs, dtype=bool)
    held[rng.choice(n_pairs, size=max(3, int(round(splits.random_fraction * n_pairs))), replace=False)] = True
    out["random"] = (held, None)
    donors = np.unique(panel.donor)
    n_d = max(1, int(round(splits.donor_fraction * len(donors))))
    held_d = rng.choice(donors, size=min(n_d, len(donors)), replace=False)
    rows = np.isin(panel.donor, held_d)
    out["donor"] = (_pairs_touching(rows), rows)
    branches = np.unique(panel.branch)
    root_branch = None
    if panel.ontology is not None and panel.ontology.root is not None:
        root_branch = panel.ontology.branch_of.get(panel.ontology.root)
    candidates = [b for b in branches if b != root_branch] or list(branches)
    held_b = rng.choice(candidates, size=min(splits.n_clades, len(candidates)), replace=False)
    rows = np.isin(panel.branch, held_b)
    out["clade"] = (_pairs_touching(rows), rows)
    for name, (_, r) in out.items():
        if r is not None and r.sum() < 3:
            raise InsufficientData(f"{name} holdout has {int(r.sum())} rows; need at least 3")
    return out


def _safe_spearman(a, b) -> float:
    try:
        return metrics.spearman(a, b)
    except UndefinedCorrelation:
        return float("nan")


def gate(head: LetHead, panel: Panel, splits: GateSplits = GateSplits(), n_perm: int = stats.DEFAULT_N_PERM,
         seed: int = 0, thresholds: GateThresholds = GateThresholds(),
         refit: Callable[[Panel, np.ndarray | None, np.ndarray | None], LetHead] | None = None) -> GateReport:
    """Quality gates for a head on a panel.

    Holdout correlations are Spearman between predicted and target distances on
    held-out pairs.  Without ``refit`` the given head is scored as-is (the
    transfer setting, where every pair is unseen).  With ``refit`` the head is
    retrained per split via ``refit(panel_rows, pair_weights, row_mask)`` and
    scored on the pairs it never saw.  Rows are put in ``row_id`` order first,
    so the report does not depend on how the panel happens to be sorted.
    """
    panel = panel.subset(np.argsort(panel.row_id, kind="stable"))
    X = panel.features
    Z = head.encode(X)
    n = panel.n
    K = min(splits.n_neighbors, n - 2)
    trust = metrics.trustworthiness(X, Z, K)
    iu = np.triu_indices(n, 1)
    D_hat = latent_distances(Z, head.beta)
    T = panel.d_target
    pred, target = D_hat[iu], T[iu]
    rng = np.random.default_rng([seed, 7])
    masks = _holdout_masks(panel, splits, rng)
    corrs = {}
    for name, (pair_mask, row_mask) in masks.items():
        p = pred
        if refit is not None:
            if row_mask is None:
                w = np.ones((n, n))
                w[iu[0][pair_mask], iu[1][pair_mask]] = 0.0
                w[iu[1][pair_mask], iu[0][pair_mask]] = 0.0
                refit_head = refit(panel, w, None)
            else:
                refit_head = refit(panel.subset(~row_mask), None, ~row_mask)
            p = latent_distances(refit_head.encode(X), refit_head.beta)[iu]
        corrs[name] = _safe_spearman(p[pair_mask], target[pair_mask])
    corr_all = _safe_spearman(pred, target)
    blocked_p = blocked_distance_p(pred, T, panel.blocks(), n_perm, seed)
    c = (corrs["random"], corrs["donor"], corrs["clade"])
    return GateReport(trustworthiness=trust, corr_random=c[0], corr_donor=c[1], corr_clade=c[2],
                      blocked_p=blocked_p, passed=evaluate_gate(trust, c, blocked_p, thresholds),
                      corr_all=corr_all, n_perm=n_perm, thresholds=thresholds)


def blocked_distance_p(pred: np.ndarray, target_matrix: np.ndarray, blocks: np.ndarray,
                       n_perm: int, seed: int) -> float:
    """Blocked permutation p for Spearman(pred pairs, target pairs), rows permuted within blocks."""
    from scipy.stats import rankdata

    n = len(target_matrix)
    iu = np.triu_indices(n, 1)
    rp = rankdata(pred)
    rp = rp - rp.mean()
    rp /= np.linalg.norm(rp)
    Rt = np.zeros((n, n))
    rt = rankdata(target_matrix[iu])
    rt = rt - rt.mean()
    norm_t = np.linalg.norm(rt)
    if norm_t == 0 or not np.isfinite(rp).all():
        return 1.0
    Rt[iu] = rt / norm_t
    Rt = Rt + Rt.T
    observed = float(rp @ Rt[iu])

    def recompute(perm):
        return float(rp @ Rt[np.ix_(perm, perm)][iu])

    return stats.blocked_permutation_p(observed, recompute, blocks, n_perm=n_perm, seed=seed)


def transfer(head: LetHead, external: Panel, n_perm: int = stats.DEFAULT_N_PERM, seed: int = 0,
             splits: GateSplits = GateSplits(),
             thresholds: GateThresholds = GateThresholds()) -> tuple[np.ndarray, GateReport]:
    """Zero-shot application of a frozen head plus gating on the external panel."""
    if not head.frozen:
        raise InvalidArgument("transfer requires a frozen head")
    if external.dim != head.D:
        raise ShapeError(f"head expects {head.D} features, panel has {external.dim}")
    Z = head.encode(external.features)
    return Z, gate(head, external, splits=splits, n_perm=n_perm, seed=seed, thresholds=thresholds)
