"""Benchmark campaigns: donor-holdout splits, representations, probes,
donor-local pseudotime and paired split-level statistics.

A campaign evaluates every method on every split.  Representations (PCA,
SVD, probes) are fitted on training rows only.  Pseudotime is computed
separately inside each test donor, and paired tests compare split-level
donor means against a reference method.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial.distance import cdist

from . import container, metrics, stats
from .errors import (InvalidArgument, InvalidRun, UndefinedCorrelation, UndefinedMetric,
                     UndefinedTask, InsufficientData)
from .let import LetHead
from .operators import FeatureOperator
from .panel import Panel, StageOntology

PROBE_KINDS = ("linear", "mlp2", "mlp3")
SOURCES = ("let_head", "feature_operator", "raw", "pca", "svd", "external")
DEFAULT_ENDPOINTS = ("pseudotime", "stage_balanced_accuracy", "branch_macro_f1")
PT_METRICS = ("pt_abs_rho", "pt_signed_rho", "pt_sign_share")


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitPlan:
    split_id: int
    train_donors: tuple
    test_donors: tuple
    train_cap: int
    seed: int
    train_rows: np.ndarray = field(repr=False)
    test_rows: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.train_donors or not self.test_donors:
            raise InvalidArgument("train and test donor sets must be non-empty")
        if set(self.train_donors) & set(self.test_donors):
            raise InvalidArgument("train and test donors overlap")


def stratified_cap(stage: np.ndarray, rows: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    """Subsample ``rows`` to at most ``cap``, keeping stage proportions (largest remainder)."""
    rows = np.asarray(rows)
    if len(rows) <= cap:
        return np.sort(rows)
    st = stage[rows]
    names, counts = np.unique(st, return_counts=True)
    exact = counts * cap / len(rows)
    quota = np.floor(exact).astype(int)
    extra = cap - quota.sum()
    order = np.argsort(-(exact - quota), kind="stable")
    quota[order[:extra]] += 1
    out = []
    for s, q in zip(names, quota):
        members = rows[st == s]
        out.append(rng.choice(members, size=q, replace=False))
    return np.sort(np.concatenate(out))


def make_splits(panel: Panel, n_splits: int = 12, n_test_donors: int = 2, train_cap: int = 100_000,
                seed: int = 0) -> list[SplitPlan]:
    """Grouped donor-holdout splits; test donors are drawn afresh for every split."""
    donors = np.unique(panel.donor)
    if len(donors) < n_test_donors + 1:
        raise InvalidArgument(f"{len(donors)} donors cannot give {n_test_donors} test donors plus training")
    if n_splits < 1 or n_test_donors < 1:
        raise InvalidArgument("n_splits and n_test_donors must be >= 1")
    plans = []
    for s in range(n_splits):
        rng = np.random.default_rng([seed, s])
        test = tuple(sorted(rng.choice(donors, size=n_test_donors, replace=False).tolist()))
        train = tuple(d for d in donors.tolist() if d not in test)
        train_rows = stratified_cap(panel.stage, np.flatnonzero(np.isin(panel.donor, train)), train_cap, rng)
        test_rows = np.flatnonzero(np.isin(panel.donor, test))
        plans.append(SplitPlan(split_id=s, train_donors=train, test_donors=test, train_cap=train_cap,
                               seed=seed, train_rows=train_rows, test_rows=test_rows))
    return plans


# ---------------------------------------------------------------------------
# probes


def _standardize_fit(Z):
    mu = Z.mean(axis=0)
    sd = Z.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return mu, sd


@dataclass
class Probe:
    """Classifier on a representation; inputs are standardized with training statistics."""

    kind: str
    classes: np.ndarray
    mu: np.ndarray
    sd: np.ndarray
    layers: list  # [(W, b), ...]

    def logits(self, Z: np.ndarray) -> np.ndarray:
        H = (np.asarray(Z, dtype=np.float64) - self.mu) / self.sd
        for i, (W, b) in enumerate(self.layers):
            H = H @ W + b
            if i < len(self.layers) - 1:
                H = np.maximum(H, 0.0)
        return H

    def predict_proba(self, Z: np.ndarray) -> np.ndarray:
        L = self.logits(Z)
        L = L - L.max(axis=1, keepdims=True)
        P = np.exp(L)
        return P / P.sum(axis=1, keepdims=True)

    def predict(self, Z: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.logits(Z), axis=1)]

    def score(self, Z: np.ndarray) -> np.ndarray:
        """Positive-class probability for a two-class probe."""
        if len(self.classes) != 2:
            raise UndefinedTask("score() is defined for two-class probes only")
        return self.predict_proba(Z)[:, 1]

    def to_bytes(self) -> bytes:
        arrays = {"mu": self.mu, "sd": self.sd}
        for i, (W, b) in enumerate(self.layers):
            arrays[f"W{i}"] = W
            arrays[f"b{i}"] = b
        return container.dumps({"type": "probe", "kind": self.kind,
                                "classes": [str(c) for c in self.classes]}, arrays)


def _softmax_ce(L: np.ndarray, y: np.ndarray):
    L = L - L.max(axis=1, keepdims=True)
    logp = L - np.log(np.exp(L).sum(axis=1, keepdims=True))
    n = len(y)
    P = np.exp(logp)
    P[np.arange(n), y] -= 1.0
    return -float(np.mean(logp[np.arange(n), y])), P / n


def _fit_linear(H: np.ndarray, y: np.ndarray, C: int, lam: float, tol: float):
    D = H.shape[1]

    def f(theta):
        W = theta[: D * C].reshape(D, C)
        b = theta[D * C :]
        loss, G = _softmax_ce(H @ W + b, y)
        loss += 0.5 * lam * np.sum(W * W)
        gW = H.T @ G + lam * W
        return loss, np.concatenate([gW.ravel(), G.sum(axis=0)])

    res = minimize(f, np.zeros(D * C + C), jac=True, method="L-BFGS-B",
                   options={"gtol": tol, "ftol": 1e-12, "maxiter": 2000})
    return [(res.x[: D * C].reshape(D, C), res.x[D * C :])]


def _fit_mlp(H: np.ndarray, y: np.ndarray, C: int, hidden: Sequence[int], rng: np.random.Generator,
             epochs: int = 200, batch: int = 256, lr: float = 1e-3, dropout: float = 0.1,
             weight_decay: float = 1e-4):
    sizes = [H.shape[1], *hidden, C]
    layers = [[rng.standard_normal((a, b)) * np.sqrt(2.0 / a), np.zeros(b)] for a, b in zip(sizes[:-1], sizes[1:])]
    m = [[np.zeros_like(W), np.zeros_like(b)] for W, b in layers]
    v = [[np.zeros_like(W), np.zeros_like(b)] for W, b in layers]
    t = 0
    n = len(H)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            idx = order[s : s + batch]
            acts, masks = [H[idx]], []
            a = H[idx]
            for i, (W, b) in enumerate(layers):
                a = a @ W + b
                if i < len(layers) - 1:
                    a = np.maximum(a, 0.0)
                    keep = (rng.random(a.shape) >= dropout) / (1.0 - dropout)
                    a = a * keep
                    masks.append(keep)
                acts.append(a)
            _, g = _softmax_ce(a, y[idx])
            t += 1
            for i in range(len(layers) - 1, -1, -1):
                W, b = layers[i]
                gW = acts[i].T @ g + weight_decay * W
                gb = g.sum(axis=0)
                if i > 0:
                    g = (g @ W.T) * masks[i - 1] * (acts[i] > 0)
                for j, gr in enumerate((gW, gb)):
                    m[i][j] = 0.9 * m[i][j] + 0.1 * gr
                    v[i][j] = 0.999 * v[i][j] + 0.001 * gr * gr
                    mh = m[i][j] / (1 - 0.9**t)
                    vh = v[i][j] / (1 - 0.999**t)
                    layers[i][j] = layers[i][j] - lr * mh / (np.sqrt(vh) + 1e-8)
    return [(W, b) for W, b in layers]


def fit_probe(Z_train: np.ndarray, y_train, probe: str = "linear", seed: int = 0,
              lam: float = 1e-3, tol: float = 1e-6, epochs: int = 200) -> Probe:
    """Train a linear (multinomial logistic) or small MLP probe.

    ``mlp2`` is ``k -> 64 -> C`` and ``mlp3`` is ``k -> 128 -> 64 -> C``, both
    ReLU with train-time dropout 0.1 and Adam.
    """
    if probe not in PROBE_KINDS:
        raise InvalidArgument(f"unknown probe kind {probe!r}")
    Z = np.asarray(Z_train, dtype=np.float64)
    y_raw = np.asarray(y_train)
    classes, y = np.unique(y_raw, return_inverse=True)
    if len(classes) < 2:
        raise UndefinedTask("probe training needs at least two classes")
    mu, sd = _standardize_fit(Z)
    H = (Z - mu) / sd
    C = len(classes)
    if probe == "linear":
        layers = _fit_linear(H, y, C, lam, tol)
    else:
        hidden = (64,) if probe == "mlp2" else (128, 64)
        layers = _fit_mlp(H, y, C, hidden, np.random.default_rng(seed), epochs=epochs)
    return Probe(kind=probe, classes=classes, mu=mu, sd=sd, layers=layers)


# ---------------------------------------------------------------------------
# pseudotime


class Pseudotime(NamedTuple):
    values: np.ndarray
    root: int
    partial: bool


def knn_graph(Z: np.ndarray, k: int) -> csr_matrix:
    """Symmetric (union) kNN graph with Euclidean edge lengths; ties go to the lower index."""
    D = cdist(Z, Z)
    n = len(Z)
    order = D.copy()
    np.fill_diagonal(order, np.inf)
    nbrs = np.argsort(order, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    cols = nbrs.ravel()
    A = np.zeros((n, n))
    A[rows, cols] = D[rows, cols]
    A = np.maximum(A, A.T)
    return csr_matrix(A)


def donor_local_pseudotime(Z: np.ndarray, root_hint: np.ndarray, k_nn: int = 10) -> Pseudotime:
    """Graph shortest-path distance from the cell nearest ``root_hint``.

    Cells the root cannot reach get the largest finite distance plus one
    unit and the result is flagged ``partial``.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n = len(Z)
    if n < k_nn + 2:
        raise InsufficientData(f"{n} cells; donor-local pseudotime needs at least {k_nn + 2}")
    root = int(np.argmin(np.sum((Z - np.asarray(root_hint)) ** 2, axis=1)))
    dist = dijkstra(knn_graph(Z, k_nn), directed=False, indices=root)
    finite = np.isfinite(dist)
    if finite.sum() <= 1:
        raise InvalidRun("root is disconnected from every other cell")
    partial = not finite.all()
    if partial:
        dist = np.where(finite, dist, dist[finite].max() + 1.0)
    return Pseudotime(values=dist, root=root, partial=partial)


# ---------------------------------------------------------------------------
# representations


@dataclass
class MethodUnderTest:
    name: str
    source: str
    probe: str = "linear"
    k: int = 10
    head: LetHead | None = None
    operator: FeatureOperator | None = None
    external: Mapping | None = None  # row_id -> latent vector
    unit_latent: bool = True

    def __post_init__(self):
        if self.source not in SOURCES:
            raise InvalidArgument(f"unknown representation source {self.source!r}")
        if self.probe not in PROBE_KINDS:
            raise InvalidArgument(f"unknown probe kind {self.probe!r}")
        if self.source == "let_head" and self.head is None:
            raise InvalidArgument(f"method {self.name!r} needs a head")
        if self.source == "feature_operator" and self.operator is None:
            raise InvalidArgument(f"method {self.name!r} needs an operator")
        if self.source == "external" and self.external is None:
            raise InvalidArgument(f"method {self.name!r} needs an external latent table")


class Representation:
    """A fitted row map; ``fit`` only ever sees training rows."""

    def __init__(self, method: MethodUnderTest):
        self.method = method
        self.mean = None
        self.basis = None

    def fit(self, X_train: np.ndarray) -> "Representation":
        m = self.method
        if m.source in ("pca", "svd"):
            self.mean = X_train.mean(axis=0) if m.source == "pca" else np.zeros(X_train.shape[1])
            _, _, Vt = np.linalg.svd(X_train - self.mean, full_matrices=False)
            Vt = Vt[: m.k]
            # fix signs so the largest-|loading| entry of each axis is positive
            sign = np.sign(Vt[np.arange(len(Vt)), np.argmax(np.abs(Vt), axis=1)])
            self.basis = (Vt * sign[:, None]).T
        return self

    def transform(self, X: np.ndarray, row_id: np.ndarray | None = None) -> np.ndarray:
        m = self.method
        if m.source == "raw":
            return X
        if m.source in ("pca", "svd"):
            return (X - self.mean) @ self.basis
        if m.source == "feature_operator":
            return m.operator.apply(X)
        if m.source == "let_head":
            F = m.operator.apply(X) if m.operator is not None else X
            Z = m.head.encode(F)
            if m.unit_latent:
                Z = Z / np.maximum(np.linalg.norm(Z, axis=1, keepdims=True), 1e-12)
            return Z
        try:
            return np.array([m.external[r] for r in row_id], dtype=np.float64)
        except KeyError as exc:
            raise InvalidRun(f"external representation has no row {exc.args[0]!r}") from None

    def fingerprint(self) -> str:
        arrays = {}
        if self.basis is not None:
            arrays = {"mean": self.mean, "basis": self.basis}
        return container.digest(container.dumps({"method": self.method.name}, arrays))


def raw_log1p(counts: np.ndarray) -> np.ndarray:
    """Ingestion transform for count-valued raw features."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise InvalidArgument("counts must be non-negative for log1p ingestion")
    return np.log1p(counts)


# ---------------------------------------------------------------------------
# campaign


@dataclass
class CampaignReport:
    values: list                      # dicts: split, method, metric, value, valid
    paired: list                      # dicts: method, metric, reference, n_pairs, mean_delta, statistic, p, q
    pooled: list                      # dicts: method, metric, mean, n_obs
    reference: str
    meta: dict = field(default_factory=dict)

    def value_table(self) -> dict:
        out = {}
        for row in self.values:
            if row["valid"]:
                out.setdefault((row["method"], row["metric"]), {})[row["split"]] = row["value"]
        return out

    def coverage(self) -> dict:
        cov = {}
        for row in self.values:
            key = (row["method"], row["metric"])
            cov[key] = cov.get(key, 0) + int(row["valid"])
        return cov

    def paired_row(self, method: str, metric: str) -> dict:
        for row in self.paired:
            if row["method"] == method and row["metric"] == metric:
                return row
        raise KeyError((method, metric))

    def pooled_row(self, method: str, metric: str) -> dict:
        for row in self.pooled:
            if row["method"] == method and row["metric"] == metric:
                return row
        raise KeyError((method, metric))

    @staticmethod
    def _csv(rows: list, columns: Sequence[str]) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: _fmt(r.get(c)) for c in columns})
        return buf.getvalue()

    def to_csv(self) -> dict:
        return {
            "values.csv": self._csv(self.values, ["split", "method", "metric", "value", "valid", "note"]),
            "paired.csv": self._csv(self.paired, ["method", "reference", "metric", "n_pairs", "mean_delta",
                                                  "statistic", "p", "q"]),
            "pooled.csv": self._csv(self.pooled, ["method", "metric", "mean", "n_obs"]),
        }

    def summary(self) -> dict:
        return {"reference": self.reference, "meta": self.meta,
                "pooled": [{k: _jsonable(v) for k, v in r.items()} for r in self.pooled],
                "paired": [{k: _jsonable(v) for k, v in r.items()} for r in self.paired]}

    def write(self, out_dir: str | Path) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = dict(self.to_csv())
        files["summary.json"] = json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"
        digests = {}
        for name, text in files.items():
            blob = text.encode()
            (out / name).write_bytes(blob)
            digests[name] = container.digest(blob)
        return digests


def _fmt(v):
    if isinstance(v, float):
        return "nan" if not np.isfinite(v) else repr(v)
    return "" if v is None else v


def _jsonable(v):
    if isinstance(v, (float, np.floating)):
        return None if not np.isfinite(v) else float(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def _safe(fn: Callable[[], float]) -> tuple[float, str]:
    try:
        v = float(fn())
        return v, ""
    except (UndefinedTask, UndefinedMetric, UndefinedCorrelation, InvalidRun, InsufficientData) as exc:
        return float("nan"), f"{type(exc).__name__}: {exc}"


def _pseudotime_metrics(Z_test, test: Panel, root_hint: np.ndarray, k_nn: int) -> dict:
    rhos = []
    for d in np.unique(test.donor):
        rows = test.donor == d
        pt = donor_local_pseudotime(Z_test[rows], root_hint, k_nn)
        rhos.append(metrics.spearman(pt.values, test.stage_depth[rows]))
    signed, mean_abs, share = metrics.orientation_summary(rhos)
    return {"pt_abs_rho": mean_abs, "pt_signed_rho": signed, "pt_sign_share": share}


def evaluate_split(method: MethodUnderTest, cells: Panel, plan: SplitPlan,
                   endpoints: Sequence[str] = DEFAULT_ENDPOINTS, binary_tasks: Mapping | None = None,
                   k_nn: int = 10, seed: int = 0) -> list[dict]:
    """All endpoint values of one method on one split (invalid runs recorded, not raised)."""
    train = cells.subset(plan.train_rows)
    test = cells.subset(plan.test_rows)
    rep = Representation(method).fit(train.features)
    Z_tr = rep.transform(train.features, train.row_id)
    Z_te = rep.transform(test.features, test.row_id)
    rows = []

    def record(metric, value, note=""):
        rows.append({"split": plan.split_id, "method": method.name, "metric": metric,
                     "value": value, "valid": bool(np.isfinite(value)), "note": note})

    probe_seed = int(np.random.default_rng([seed, plan.split_id]).integers(2**31))
    for ep in endpoints:
        if ep == "pseudotime":
            root_name = cells.ontology.root if cells.ontology is not None else None
            stem = train.stage == root_name
            if not stem.any():
                for mname in PT_METRICS:
                    record(mname, float("nan"), "no root-stage training cells")
                continue
            hint = Z_tr[stem].mean(axis=0)
            try:
                vals = _pseudotime_metrics(Z_te, test, hint, k_nn)
                for mname in PT_METRICS:
                    record(mname, vals[mname])
            except (InvalidRun, InsufficientData, UndefinedCorrelation) as exc:
                for mname in PT_METRICS:
                    record(mname, float("nan"), f"{type(exc).__name__}: {exc}")
        elif ep == "stage_balanced_accuracy":
            v, note = _safe(lambda: metrics.balanced_accuracy(
                fit_probe(Z_tr, train.stage, method.probe, probe_seed).predict(Z_te), test.stage))
            record(ep, v, note)
        elif ep == "branch_macro_f1":
            v, note = _safe(lambda: metrics.macro_f1(
                fit_probe(Z_tr, train.branch, method.probe, probe_seed).predict(Z_te), test.branch))
            record(ep, v, note)
        else:
            raise InvalidArgument(f"unknown endpoint {ep!r}")
    for name, (neg, pos) in (binary_tasks or {}).items():
        def auc():
            tr = np.isin(train.stage, (neg, pos))
            te = np.isin(test.stage, (neg, pos))
            probe = fit_probe(Z_tr[tr], train.stage[tr] == pos, method.probe, probe_seed)
            return metrics.auroc(probe.score(Z_te[te]), test.stage[te] == pos)
        v, note = _safe(auc)
        record(f"auroc_{name}", v, note)
    return rows


def run_campaign(methods: Sequence[MethodUnderTest], cells: Panel, splits: Sequence[SplitPlan],
                 reference: str, endpoints: Sequence[str] = DEFAULT_ENDPOINTS,
                 binary_tasks: Mapping | None = None, k_nn: int = 10, seed: int = 0) -> CampaignReport:
    """Evaluate all methods on all splits; paired Wilcoxon vs ``reference`` with per-metric BH.

    Deltas are ``method - reference`` on the splits where both are valid.
    """
    names = [m.name for m in methods]
    if reference not in names:
        raise InvalidArgument(f"reference {reference!r} is not among the methods")
    if len(set(names)) != len(names):
        raise InvalidArgument("method names must be unique")
    values = []
    for plan in splits:
        for m in methods:
            values.extend(evaluate_split(m, cells, plan, endpoints, binary_tasks, k_nn, seed))
    report = CampaignReport(values=values, paired=[], pooled=[], reference=reference,
                            meta={"n_splits": len(splits), "methods": names, "endpoints": list(endpoints),
                                  "seed": seed, "k_nn": k_nn})
    table = report.value_table()
    metric_names = list(dict.fromkeys(r["metric"] for r in values))
    for m in names:
        for metric in metric_names:
            vals = table.get((m, metric), {})
            report.pooled.append({"method": m, "metric": metric,
                                  "mean": float(np.mean(list(vals.values()))) if vals else float("nan"),
                                  "n_obs": len(vals)})
    for metric in metric_names:
        ref = table.get((reference, metric), {})
        family = []
        for m in names:
            if m == reference:
                continue
            other = table.get((m, metric), {})
            common = sorted(set(ref) & set(other))
            a = np.array([other[s] for s in common])
            b = np.array([ref[s] for s in common])
            row = {"method": m, "reference": reference, "metric": metric, **stats.paired_summary(a, b)}
            family.append(row)
        ps = np.array([r["p"] for r in family], dtype=np.float64)
        ok = np.isfinite(ps)
        q = np.full(len(ps), np.nan)
        if ok.any():
            q[ok] = stats.bh_fdr(ps[ok])
        for r, qv in zip(family, q):
            r["q"] = float(qv)
            report.paired.append(r)
    return report


# ---------------------------------------------------------------------------
# panel I/O


def write_panel_csv(panel: Panel, path: str | Path) -> None:
    """Columnar panel: row_id, labels, then ``f0..f{D-1}`` feature columns."""
    cols = ["row_id", "donor", "tissue", "branch", "stage", "stage_depth"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols + [f"f{j}" for j in range(panel.dim)])
        for i in range(panel.n):
            w.writerow([panel.row_id[i], panel.donor[i], panel.tissue[i], panel.branch[i], panel.stage[i],
                        int(panel.stage_depth[i])] + [repr(float(v)) for v in panel.features[i]])


def read_panel_csv(path: str | Path, ontology: StageOntology | None = None,
                   log1p: bool = False) -> Panel:
    """Read the columnar schema written by :func:`write_panel_csv`.

    Without an ontology, ``d_target`` is ``|depth_i - depth_j|``.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    required = ["row_id", "donor", "tissue", "branch", "stage", "stage_depth"]
    missing = [c for c in required if c not in header]
    if missing:
        raise InvalidArgument(f"panel CSV lacks columns {missing}")
    fcols = [i for i, c in enumerate(header) if c not in required]
    if not fcols:
        raise InvalidArgument("panel CSV has no feature columns")
    col = {c: header.index(c) for c in required}
    X = np.array([[float(r[i]) for i in fcols] for r in rows])
    if log1p:
        X = raw_log1p(X)
    lab = {c: np.array([r[col[c]] for r in rows]) for c in required}
    depth = lab["stage_depth"].astype(np.int64)
    target = None
    if ontology is None:
        target = np.abs(depth[:, None] - depth[None, :]).astype(np.float64)
    return Panel(features=X, donor=lab["donor"], tissue=lab["tissue"], branch=lab["branch"],
                 stage=lab["stage"], stage_depth=depth, ontology=ontology, explicit_target=target,
                 row_id=lab["row_id"])


def read_external_latent(path: str | Path) -> dict:
    """Plug-in representation: CSV with a ``row_id`` column followed by latent columns."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "row_id":
            raise InvalidArgument("external latent CSV must start with a row_id column")
        return {r[0]: np.array([float(v) for v in r[1:]]) for r in reader}
