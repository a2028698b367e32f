"""Planted-structure generator: a branching stage tree, donors and tissues,
and a weight tensor in which designated heads expose the stage code.

Gene space is split into three orthogonal parts:

- a signal subspace ``M`` (``code_dim`` columns) carrying each stage's code;
- a nuisance subspace ``N`` carrying donor/tissue offsets and per-cell
  nuisance variation (large, so raw-feature geometry is dominated by it);
- the remainder, which only sees isotropic noise.

Planted heads are ``A = M Q M^T`` with ``Q`` a random rotation, so
``x A`` keeps exactly the stage code (rotated) and drops everything else.
Distractor heads are products of Gaussian factors of rank ``distractor_rank``
(full-rank Gaussian when ``None``).
"""
from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.stats import ortho_group

from .errors import InvalidArgument
from .let import distance_term
from .operators import WeightTensor
from .panel import Panel, StageOntology, aggregate_anchors

ROOT = "stem"


@dataclass(frozen=True)
class SynthConfig:
    n_branches: int = 3
    depth_per_branch: int = 3
    n_donors: int = 6
    n_external_donors: int = 2
    n_bench_donors: int = 8
    n_tissues: int = 3
    cells_per_stage: int = 20
    G: int = 64
    code_dim: int = 8
    nuisance_dim: int = 8
    noise_sigma: float = 0.1
    nuisance_sigma: float = 1.5
    signal_scale: float = 3.0
    donor_effect: float = 0.3
    tissue_effect: float = 0.3
    n_layers: int = 4
    n_heads: int = 4
    planted_heads: tuple = ((1, 2),)
    distractor_rank: int | None = 4
    distractor_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "planted_heads", tuple(tuple(int(v) for v in u) for u in self.planted_heads))
        if not self.planted_heads:
            raise InvalidArgument("planted_heads must be non-empty")
        if self.G < 16:
            raise InvalidArgument("G must be >= 16")
        if self.noise_sigma < 0 or self.nuisance_sigma < 0:
            raise InvalidArgument("noise scales must be >= 0")
        if self.n_donors < 2:
            raise InvalidArgument("need at least 2 internal donors")
        if self.n_external_donors < 1 or self.n_bench_donors < 2:
            raise InvalidArgument("need external and benchmark donors")
        if self.code_dim + self.nuisance_dim > self.G:
            raise InvalidArgument("code_dim + nuisance_dim exceeds G")
        if self.n_branches < 1 or self.depth_per_branch < 1:
            raise InvalidArgument("tree needs at least one branch of depth >= 1")
        for l, h in self.planted_heads:
            if not (0 <= l < self.n_layers and 0 <= h < self.n_heads):
                raise InvalidArgument(f"planted head ({l}, {h}) outside the tensor")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["planted_heads"] = [list(u) for u in self.planted_heads]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "planted_heads" in d:
            d["planted_heads"] = tuple(tuple(u) for u in d["planted_heads"])
        return cls(**d)


@dataclass(frozen=True)
class StageTree:
    names: tuple
    parent: dict
    branch_of: dict
    depth: dict

    @property
    def adjacency(self) -> dict:
        adj = {s: [] for s in self.names}
        for child, par in self.parent.items():
            if par is not None:
                adj[child].append(par)
                adj[par].append(child)
        return adj

    @property
    def n_branchpoints(self) -> int:
        return sum(1 for s, nb in self.adjacency.items() if len(nb) >= 3)


def build_tree(n_branches: int, depth_per_branch: int) -> StageTree:
    names = [ROOT]
    parent = {ROOT: None}
    branch_of = {ROOT: "root"}
    depth = {ROOT: 0}
    for b in range(n_branches):
        prev = ROOT
        for d in range(1, depth_per_branch + 1):
            s = f"b{b}_d{d}"
            names.append(s)
            parent[s] = prev
            branch_of[s] = f"b{b}"
            depth[s] = d
            prev = s
    return StageTree(tuple(names), parent, branch_of, depth)


def oracle_stage_distance(stage_a: str, stage_b: str, tree: StageTree) -> int:
    """Unweighted path length between two stages (breadth-first search)."""
    adj = tree.adjacency
    for s in (stage_a, stage_b):
        if s not in adj:
            raise InvalidArgument(f"unknown stage {s!r}")
    seen = {stage_a: 0}
    queue = deque([stage_a])
    while queue:
        s = queue.popleft()
        if s == stage_b:
            return seen[s]
        for t in adj[s]:
            if t not in seen:
                seen[t] = seen[s] + 1
                queue.append(t)
    raise InvalidArgument(f"{stage_b!r} unreachable from {stage_a!r}")


def tree_ontology(tree: StageTree) -> StageOntology:
    n = len(tree.names)
    D = np.zeros((n, n))
    for i, a in enumerate(tree.names):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = oracle_stage_distance(a, tree.names[j], tree)
    return StageOntology(names=tree.names, dist=D, root=ROOT, branch_of=dict(tree.branch_of),
                         depth=dict(tree.depth))


def spherical_codes(dist: np.ndarray, dim: int, rng: np.random.Generator, restarts: int = 3,
                    beta: float | None = None):
    """Unit vectors whose ``beta * angle`` best matches ``dist`` (least squares).

    ``beta`` defaults to ``max(dist) / (pi/2)`` so the farthest stages sit at
    right angles.  Left free, the fit drifts to the flat limit (huge beta,
    tiny angles), which no noisy latent can resolve.
    """
    n = len(dist)
    if beta is None:
        beta = float(np.max(dist)) / (np.pi / 2)
    log_beta = np.log(beta)
    best = None

    def f(p):
        v, gZ, _ = distance_term(p.reshape(n, dim), dist, log_beta)
        return v, gZ.ravel()

    for _ in range(restarts):
        res = minimize(f, rng.standard_normal(n * dim), jac=True, method="L-BFGS-B",
                       options={"maxiter": 3000})
        if best is None or res.fun < best.fun:
            best = res
    Z = best.x.reshape(n, dim)
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    return Z, float(beta), float(best.fun)


@dataclass
class Truth:
    tree: StageTree
    ontology: StageOntology
    codes: np.ndarray
    code_beta: float
    code_residual: float
    signal_basis: np.ndarray
    nuisance_basis: np.ndarray
    planted_heads: tuple
    planted_rank: int
    binary_tasks: dict = field(default_factory=dict)

    @property
    def stage_depth(self) -> dict:
        return dict(self.tree.depth)

    @property
    def branch(self) -> dict:
        return dict(self.tree.branch_of)


@dataclass
class SynthData:
    tensor: WeightTensor
    cells: Panel
    internal: Panel
    external: Panel
    truth: Truth
    config: SynthConfig


def _cohort(cfg: SynthConfig, rng, donors, tissues, tree, codes, M, N, donor_fx, tissue_fx,
            ontology, cells_per_stage: int) -> Panel:
    rows, dn, ts, br, st, dp = [], [], [], [], [], []
    for d in donors:
        for t in tissues:
            for si, s in enumerate(tree.names):
                m = cells_per_stage
                signal = cfg.signal_scale * codes[si] @ M.T
                nuis = (donor_fx[d] + tissue_fx[t])[None, :] \
                    + cfg.nuisance_sigma * rng.standard_normal((m, N.shape[1])) @ N.T
                noise = cfg.noise_sigma * rng.standard_normal((m, cfg.G))
                rows.append(signal[None, :] + nuis + noise)
                dn += [d] * m
                ts += [t] * m
                br += [tree.branch_of[s]] * m
                st += [s] * m
                dp += [tree.depth[s]] * m
    X = np.vstack(rows)
    ids = [f"{d}:{t}:{s}:{i}" for d, t, s, i in zip(dn, ts, st, range(len(st)))]
    return Panel(features=X, donor=np.array(dn), tissue=np.array(ts), branch=np.array(br),
                 stage=np.array(st), stage_depth=np.array(dp), ontology=ontology, row_id=np.array(ids))


def generate(config: SynthConfig = SynthConfig()) -> SynthData:
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    tree = build_tree(cfg.n_branches, cfg.depth_per_branch)
    onto = tree_ontology(tree)
    codes, code_beta, code_res = spherical_codes(onto.dist, cfg.code_dim, rng)

    basis = ortho_group.rvs(cfg.G, random_state=rng)
    M = basis[:, : cfg.code_dim]
    N = basis[:, cfg.code_dim : cfg.code_dim + cfg.nuisance_dim]

    weights = np.empty((cfg.n_layers, cfg.n_heads, cfg.G, cfg.G))
    r_d = cfg.G if cfg.distractor_rank is None else cfg.distractor_rank
    for l in range(cfg.n_layers):
        for h in range(cfg.n_heads):
            B = rng.standard_normal((cfg.G, r_d)) / np.sqrt(cfg.G)
            C = rng.standard_normal((r_d, cfg.G)) / np.sqrt(r_d)
            weights[l, h] = cfg.distractor_scale * B @ C
    for l, h in cfg.planted_heads:
        Q = ortho_group.rvs(cfg.code_dim, random_state=rng) if cfg.code_dim > 1 else np.eye(1)
        weights[l, h] = M @ Q @ M.T
    tensor = WeightTensor(weights)

    n_all = cfg.n_donors + cfg.n_external_donors + cfg.n_bench_donors
    donor_names = [f"d{i:02d}" for i in range(n_all)]
    tissue_names = [f"t{i}" for i in range(cfg.n_tissues + 1)]

    def offset(scale):
        v = rng.standard_normal(cfg.nuisance_dim)
        return scale * cfg.signal_scale * rng.uniform(0.5, 1.0) * (v / np.linalg.norm(v)) @ N.T

    donor_fx = {d: offset(cfg.donor_effect) for d in donor_names}
    tissue_fx = {t: offset(cfg.tissue_effect) for t in tissue_names}

    internal_donors = donor_names[: cfg.n_donors]
    external_donors = donor_names[cfg.n_donors : cfg.n_donors + cfg.n_external_donors]
    bench_donors = donor_names[cfg.n_donors + cfg.n_external_donors :]
    seen_tissues = tissue_names[: cfg.n_tissues]

    args = (tree, codes, M, N, donor_fx, tissue_fx, onto, cfg.cells_per_stage)
    internal_cells = _cohort(cfg, rng, internal_donors, seen_tissues, *args)
    external_cells = _cohort(cfg, rng, external_donors, tissue_names, *args)
    bench_cells = _cohort(cfg, rng, bench_donors, seen_tissues, *args)

    leaves = [f"b{b}_d{cfg.depth_per_branch}" for b in range(cfg.n_branches)]
    tasks = {}
    if cfg.n_branches >= 2:
        tasks["leaf01"] = (leaves[0], leaves[1])
    if cfg.n_branches >= 3:
        tasks["leaf12"] = (leaves[1], leaves[2])

    truth = Truth(tree=tree, ontology=onto, codes=codes, code_beta=code_beta, code_residual=code_res,
                  signal_basis=M, nuisance_basis=N, planted_heads=cfg.planted_heads,
                  planted_rank=cfg.code_dim, binary_tasks=tasks)
    return SynthData(tensor=tensor, cells=bench_cells, internal=aggregate_anchors(internal_cells),
                     external=aggregate_anchors(external_cells), truth=truth, config=cfg)


def shuffle_stages(panel: Panel, seed: int) -> Panel:
    """Label-shuffled copy: stage (with its depth and branch) permuted across all rows."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(panel.n)
    return panel.with_labels(stage=panel.stage[perm], stage_depth=panel.stage_depth[perm],
                             branch=panel.branch[perm])


@dataclass
class FactorProblem:
    """Low-rank operator whose endpoints depend on known factors only."""

    operator: "FeatureOperator"
    X_train: np.ndarray
    X_eval: np.ndarray
    labels_train: dict
    labels_eval: dict
    tasks: dict
    read_basis: np.ndarray
    write_basis: np.ndarray

    def adaptor(self):
        """Frozen head projecting operator outputs onto the write basis (``z_f = x . u_f``)."""
        from .let import LetHead

        return LetHead(W=self.write_basis.T, b=np.zeros(self.write_basis.shape[0]), log_beta=0.0,
                       variant="anchor", hyper={"construction": "write-basis projection"}, frozen=True)


def planted_factor_problem(G: int = 64, n_factors: int = 16,
                           tasks: dict | None = None, n_train: int = 600, n_eval: int = 600,
                           noise_sigma: float = 0.05, margin: float = 0.5, seed: int = 0) -> FactorProblem:
    """Rank-``n_factors`` operator with binary endpoints planted on factor sets.

    Features are ``x = sum_f s_f r_f + noise`` with orthonormal read
    directions ``r_f``; the operator maps ``r_f`` to orthonormal write
    directions.  Endpoint ``t`` is ``sum_{f in tasks[t]} s_f > 0`` with rows
    inside the margin redrawn, so every planted factor is needed and no other
    factor carries information about it.
    """
    from .operators import FeatureOperator

    tasks = {"A": (0, 1), "B": (2, 3)} if tasks is None else {k: tuple(v) for k, v in tasks.items()}
    if 2 * n_factors > G:
        raise InvalidArgument("need G >= 2 * n_factors for disjoint read/write bases")
    if any(not 0 <= f < n_factors for fs in tasks.values() for f in fs):
        raise InvalidArgument("task factor outside the operator rank")
    rng = np.random.default_rng(seed)
    basis = ortho_group.rvs(G, random_state=rng)
    R = basis[:, :n_factors]
    Wb = basis[:, n_factors : 2 * n_factors]

    def draw(n):
        S = np.empty((0, n_factors))
        while len(S) < n:
            cand = rng.standard_normal((4 * n, n_factors))
            ok = np.all([np.abs(cand[:, list(fs)].sum(axis=1)) >= margin for fs in tasks.values()], axis=0)
            S = np.vstack([S, cand[ok]])
        S = S[:n]
        X = S @ R.T + noise_sigma * rng.standard_normal((n, G))
        labels = {t: (S[:, list(fs)].sum(axis=1) > 0).astype(np.int64) for t, fs in tasks.items()}
        return X, labels

    X_tr, y_tr = draw(n_train)
    X_ev, y_ev = draw(n_eval)
    op = FeatureOperator(kind="low_rank", dim=G,
                         arrays={"U": R.copy(), "V": Wb.copy(), "s": np.ones(n_factors)},
                         meta={"construction": "planted factors", "tasks": {k: list(v) for k, v in tasks.items()}})
    return FactorProblem(operator=op, X_train=X_tr, X_eval=X_ev, labels_train=y_tr, labels_eval=y_ev,
                         tasks=tasks, read_basis=R, write_basis=Wb)
