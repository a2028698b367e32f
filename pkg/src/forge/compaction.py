"""Head attribution, compact-operator fitting and fixed-probe factor ablation.

Ablations never retrain anything: the LET head and the endpoint probes are
frozen on the intact operator, and a factor is removed only at inference
time by zeroing its rank-1 component.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from . import container, metrics
from .errors import ForgeError, InvalidArgument
from .harness import Probe
from .let import LetHead, OptimizerConfig, latent_distances, train_anchor_head
from .operators import FeatureOperator, WeightTensor, compose_compact, keep_only, single_head, zero_factor
from .panel import Panel

SCAN_OPT = OptimizerConfig(lr=2e-2, steps=600)
MAX_SUBSET_CORE = 8


# ---------------------------------------------------------------------------
# head scan


@dataclass(frozen=True)
class ScanRow:
    layer: int
    head: int
    corr_resid: float
    trustworthiness: float
    score: float
    rank: int = 0
    error: str = ""


def external_scores(head: LetHead, external: Panel, n_neighbors: int = 10) -> tuple[float, float]:
    """Zero-shot ``(residualized corr, trustworthiness)`` of a head on an external panel."""
    Z = head.encode(external.features)
    iu = np.triu_indices(external.n, 1)
    pred = latent_distances(Z, head.beta)[iu]
    target = external.d_target[iu]
    conf = metrics.pair_confounds(external.donor, external.tissue)
    corr = metrics.residualized_correlation(pred, target, conf)
    trust = metrics.trustworthiness(external.features, Z, min(n_neighbors, external.n - 2))
    return corr, trust


def scan_heads(tensor: WeightTensor, internal: Panel, external: Panel, k: int = 10, seed: int = 0,
               opt: OptimizerConfig = SCAN_OPT, alpha: float = 1e-3,
               units: Sequence[tuple[int, int]] | None = None, workers: int = 1) -> list[ScanRow]:
    """Train one LET head per unit on ``internal`` and score it zero-shot on ``external``.

    Rows are ranked by screen score (residualized correlation), descending;
    ties keep ``(layer, head)`` order and failed units go last.  Units are
    independent, so ``workers > 1`` runs them in a thread pool with identical
    results.
    """
    if internal.dim != tensor.dim or external.dim != tensor.dim:
        raise InvalidArgument("panels must have the tensor's feature dimension")

    def one(unit):
        l, h = unit
        op = single_head(tensor, l, h)
        try:
            head = train_anchor_head(internal.with_features(op.apply(internal.features)), k=k,
                                     alpha=alpha, seed=seed, opt=opt)
            corr, trust = external_scores(head, external.with_features(op.apply(external.features)))
            return ScanRow(l, h, corr, trust, corr)
        except (ForgeError, np.linalg.LinAlgError) as exc:
            nan = float("nan")
            return ScanRow(l, h, nan, nan, nan, error=f"{type(exc).__name__}: {exc}")

    todo = list(units if units is not None else tensor.units())
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, todo))
    else:
        rows = [one(u) for u in todo]
    key = [(-r.score if np.isfinite(r.score) else np.inf, r.layer, r.head) for r in rows]
    order = sorted(range(len(rows)), key=lambda i: key[i])
    return [ScanRow(**{**rows[i].__dict__, "rank": pos + 1}) for pos, i in enumerate(order)]


# ---------------------------------------------------------------------------
# compact weights


def _relative_loss(op: FeatureOperator, panel: Panel, k: int, seed: int, opt: OptimizerConfig,
                   alpha: float) -> float:
    head = train_anchor_head(panel.with_features(op.apply(panel.features)), k=k, alpha=alpha,
                             seed=seed, opt=opt)
    return head.provenance["distance_loss"] / (0.5 * float(np.sum(panel.d_target**2)))


def fit_compact_weights(tensor: WeightTensor, units: Sequence[tuple[int, int]], internal: Panel,
                        k: int = 10, seed: int = 0, opt: OptimizerConfig = SCAN_OPT, alpha: float = 1e-3,
                        grid: Sequence[float] = (0.0, 0.25, 0.5, 1.0, 2.0), refine: int = 1,
                        return_trace: bool = False):
    """Coordinate search for ``alpha_2..alpha_k`` with ``alpha_1 = 1``.

    Each candidate weight vector is scored by the relative distance loss of a
    freshly trained adaptor on ``internal``.  After the grid pass, ``refine``
    passes try the midpoints around each current weight.
    """
    units = [tuple(int(v) for v in u) for u in units]
    if not units:
        raise InvalidArgument("need at least one unit")
    alphas = [1.0] + [0.0] * (len(units) - 1)
    trace = []

    def score(a):
        val = _relative_loss(compose_compact(tensor, units, a), internal, k, seed, opt, alpha)
        trace.append((tuple(a), val))
        return val

    if len(units) > 1:
        best = score(alphas)
        step = None
        for p in range(refine + 1):
            for i in range(1, len(units)):
                if p == 0:
                    cands = list(grid)
                else:
                    cands = [alphas[i] - step, alphas[i] + step]
                for c in cands:
                    if c == alphas[i]:
                        continue
                    trial = alphas.copy()
                    trial[i] = float(c)
                    val = score(trial)
                    if val < best - 1e-12:
                        best, alphas = val, trial
            step = (min(np.diff(sorted(grid))) if p == 0 else step) / 2.0
    op = compose_compact(tensor, units, alphas)
    return (op, trace) if return_trace else op


# ---------------------------------------------------------------------------
# fixed-probe evaluation


@dataclass(frozen=True)
class Endpoint:
    """A classification endpoint on the evaluation panel: labels plus metric."""

    name: str
    labels: np.ndarray
    metric: str = "balanced_accuracy"

    def evaluate(self, probe: Probe, Z: np.ndarray) -> float:
        if self.metric == "balanced_accuracy":
            return metrics.balanced_accuracy(probe.predict(Z), self.labels)
        if self.metric == "macro_f1":
            return metrics.macro_f1(probe.predict(Z), self.labels)
        if self.metric == "auroc":
            return metrics.auroc(probe.score(Z), self.labels == probe.classes[1])
        raise InvalidArgument(f"unknown endpoint metric {self.metric!r}")


def _endpoint_values(op: FeatureOperator, head: LetHead, probes: Mapping[str, Probe], X: np.ndarray,
                     endpoints: Sequence[Endpoint]) -> dict:
    Z = head.encode(op.apply(X))
    return {e.name: e.evaluate(probes[e.name], Z) for e in endpoints}


def _frozen_digest(head: LetHead, probes: Mapping[str, Probe]) -> str:
    parts = [head.to_bytes()] + [probes[k].to_bytes() for k in sorted(probes)]
    return container.digest(b"".join(parts))


def _check_low_rank(op: FeatureOperator) -> None:
    if op.kind not in ("low_rank", "sparse"):
        raise InvalidArgument(f"factor ablation needs a low_rank or sparse operator, got {op.kind}")


@dataclass
class AblationTable:
    intact: dict
    impact: np.ndarray                 # factors x endpoints, signed (intact - ablated)
    endpoints: list
    total_clipped: np.ndarray          # per factor: sum_e max(impact, 0)
    total_signed: np.ndarray           # per factor: sum_e impact
    order: np.ndarray                  # factors by clipped total impact, descending
    concentration: np.ndarray          # cumulative clipped share along ``order``
    frozen_digest: str

    def share(self, factors: Sequence[int]) -> float:
        tot = self.total_clipped.sum()
        return float(self.total_clipped[list(factors)].sum() / tot) if tot > 0 else 0.0

    def rows(self) -> list[dict]:
        out = []
        for f in range(len(self.total_clipped)):
            row = {"factor": f, "total_clipped": float(self.total_clipped[f]),
                   "total_signed": float(self.total_signed[f])}
            row.update({f"impact_{e}": float(v) for e, v in zip(self.endpoints, self.impact[f])})
            out.append(row)
        return out


def ablate_factors_loo(op: FeatureOperator, head: LetHead, probes: Mapping[str, Probe], X_eval: np.ndarray,
                       endpoints: Sequence[Endpoint]) -> AblationTable:
    """Zero one factor at a time with head and probes frozen; impact = intact - ablated."""
    _check_low_rank(op)
    before = _frozen_digest(head, probes)
    intact = _endpoint_values(op, head, probes, X_eval, endpoints)
    r = op.rank
    impact = np.zeros((r, len(endpoints)))
    for f in range(r):
        vals = _endpoint_values(zero_factor(op, f), head, probes, X_eval, endpoints)
        impact[f] = [intact[e.name] - vals[e.name] for e in endpoints]
    if _frozen_digest(head, probes) != before:
        raise RuntimeError("frozen head or probes changed during ablation")
    clipped = np.maximum(impact, 0.0).sum(axis=1)
    order = np.argsort(-clipped, kind="stable")
    tot = clipped.sum()
    conc = np.cumsum(clipped[order]) / tot if tot > 0 else np.ones(r)
    return AblationTable(intact=intact, impact=impact, endpoints=[e.name for e in endpoints],
                         total_clipped=clipped, total_signed=impact.sum(axis=1), order=order,
                         concentration=conc, frozen_digest=before)


@dataclass
class SubsetSweep:
    intact: dict
    subsets: list                      # tuples of factor indices
    values: list                       # dict endpoint -> value, aligned with ``subsets``
    best: dict                         # endpoint -> (subset, value, value / intact)

    def rows(self) -> list[dict]:
        return [{"subset": "+".join(map(str, s)), "size": len(s), **v} for s, v in zip(self.subsets, self.values)]


def _best_subset(subsets, values, name):
    # highest value; ties go to the smaller subset, then lexicographic order
    return min(zip(subsets, values), key=lambda sv: (-sv[1][name], len(sv[0]), sv[0]))


def subset_sweep(op: FeatureOperator, head: LetHead, probes: Mapping[str, Probe], core: Sequence[int],
                 X_eval: np.ndarray, endpoints: Sequence[Endpoint]) -> SubsetSweep:
    """Keep-only evaluation of every non-empty subset of ``core`` (all other factors zeroed)."""
    _check_low_rank(op)
    core = sorted(int(f) for f in core)
    if not core or len(core) > MAX_SUBSET_CORE:
        raise InvalidArgument(f"core must have between 1 and {MAX_SUBSET_CORE} factors")
    before = _frozen_digest(head, probes)
    intact = _endpoint_values(op, head, probes, X_eval, endpoints)
    subsets, values = [], []
    for size in range(1, len(core) + 1):
        for s in combinations(core, size):
            subsets.append(s)
            values.append(_endpoint_values(keep_only(op, s), head, probes, X_eval, endpoints))
    if _frozen_digest(head, probes) != before:
        raise RuntimeError("frozen head or probes changed during the subset sweep")
    best = {}
    for e in endpoints:
        s, v = _best_subset(subsets, values, e.name)
        ratio = v[e.name] / intact[e.name] if intact[e.name] != 0 else float("nan")
        best[e.name] = (s, v[e.name], ratio)
    return SubsetSweep(intact=intact, subsets=subsets, values=values, best=best)


def core_sufficiency(op: FeatureOperator, head: LetHead, probes: Mapping[str, Probe],
                     ordered_core: Sequence[int], evals: Sequence[tuple[np.ndarray, Sequence[Endpoint]]]):
    """Cumulative-prefix keep-only evaluation across one or more evaluation splits.

    ``evals`` holds ``(X_eval, endpoints)`` per split.  Returns one row per
    prefix with per-endpoint mean value, mean delta to intact, and Wilcoxon p
    and BH q (across prefixes, per endpoint) when there are enough splits.
    """
    from . import stats

    _check_low_rank(op)
    ordered_core = [int(f) for f in ordered_core]
    if not ordered_core:
        raise InvalidArgument("ordered_core is empty")
    names = [e.name for e in evals[0][1]]
    intact = [_endpoint_values(op, head, probes, X, eps) for X, eps in evals]
    rows = []
    for j in range(1, len(ordered_core) + 1):
        prefix = ordered_core[:j]
        kept = keep_only(op, prefix)
        vals = [_endpoint_values(kept, head, probes, X, eps) for X, eps in evals]
        row = {"prefix": "+".join(map(str, prefix)), "size": j}
        for n in names:
            v = np.array([x[n] for x in vals])
            d = v - np.array([x[n] for x in intact])
            row[f"{n}_mean"] = float(v.mean())
            row[f"{n}_delta"] = float(d.mean())
            row[f"{n}_p"] = stats.paired_summary(v, v - d)["p"]
        rows.append(row)
    for n in names:
        ps = np.array([r[f"{n}_p"] for r in rows], dtype=np.float64)
        ok = np.isfinite(ps)
        q = np.full(len(ps), np.nan)
        if ok.any():
            q[ok] = stats.bh_fdr(ps[ok])
        for r, qv in zip(rows, q):
            r[f"{n}_q"] = float(qv)
    return rows


def factor_loadings(op: FeatureOperator, factor: int, top: int = 20) -> list[dict]:
    """Top read/write coordinates of one factor, for external enrichment tools."""
    _check_low_rank(op)
    U, V = op.factors()
    out = []
    for side, vec in (("read", U[:, factor]), ("write", V[:, factor])):
        order = np.argsort(-np.abs(vec), kind="stable")[:top]
        out += [{"factor": factor, "side": side, "index": int(i), "loading": float(vec[i])} for i in order]
    return out
