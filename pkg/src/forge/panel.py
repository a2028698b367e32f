"""Row-labelled feature tables (anchors or cells) with a stage ontology."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import InvalidArgument, ShapeError

LABEL_COLUMNS = ("donor", "tissue", "branch", "stage")


@dataclass(frozen=True)
class StageOntology:
    """Stage names with their pairwise developmental distances (hops)."""

    names: tuple
    dist: np.ndarray = field(repr=False)
    root: str | None = None
    branch_of: dict = field(default_factory=dict, repr=False)
    depth: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        d = np.asarray(self.dist, dtype=np.float64)
        if d.shape != (len(self.names), len(self.names)):
            raise ShapeError("ontology distance matrix does not match the stage list")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "dist", d)

    def index(self, stages: Sequence) -> np.ndarray:
        lookup = {s: i for i, s in enumerate(self.names)}
        try:
            return np.array([lookup[s] for s in stages], dtype=np.intp)
        except KeyError as exc:
            raise InvalidArgument(f"stage {exc.args[0]!r} not in ontology") from None

    def submatrix(self, stages: Sequence) -> np.ndarray:
        idx = self.index(stages)
        return self.dist[np.ix_(idx, idx)]

    @property
    def terminals(self) -> list:
        """Stages with no deeper stage on the same branch."""
        out = []
        for s in self.names:
            if s == self.root:
                continue
            b = self.branch_of.get(s)
            if not any(self.branch_of.get(t) == b and self.depth.get(t, 0) > self.depth.get(s, 0)
                       for t in self.names):
                out.append(s)
        return out


@dataclass(frozen=True)
class Panel:
    """Feature matrix plus per-row categorical labels.

    ``d_target`` defaults to the ontology distance between row stages; an
    explicit matrix (e.g. a planted configuration) overrides it.
    """

    features: np.ndarray = field(repr=False)
    donor: np.ndarray = field(repr=False)
    tissue: np.ndarray = field(repr=False)
    branch: np.ndarray = field(repr=False)
    stage: np.ndarray = field(repr=False)
    stage_depth: np.ndarray = field(repr=False)
    ontology: StageOntology | None = field(default=None, repr=False)
    explicit_target: np.ndarray | None = field(default=None, repr=False)
    row_id: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim != 2:
            raise ShapeError("features must be a 2-D matrix")
        if not np.all(np.isfinite(X)):
            raise InvalidArgument("features contain non-finite values")
        n = len(X)
        object.__setattr__(self, "features", X)
        for name in LABEL_COLUMNS:
            col = np.asarray(getattr(self, name)).astype(str)
            if col.shape != (n,):
                raise ShapeError(f"{name} has {col.shape} entries for {n} rows")
            if np.any(col == "") or np.any(col == "nan"):
                raise InvalidArgument(f"{name} has missing labels")
            object.__setattr__(self, name, col)
        depth = np.asarray(self.stage_depth)
        if depth.shape != (n,) or np.any(depth < 0):
            raise InvalidArgument("stage_depth must be a non-negative integer per row")
        object.__setattr__(self, "stage_depth", depth.astype(np.int64))
        if self.row_id is None:
            object.__setattr__(self, "row_id", np.arange(n).astype(str))
        else:
            object.__setattr__(self, "row_id", np.asarray(self.row_id).astype(str))
        if self.explicit_target is not None:
            d = np.asarray(self.explicit_target, dtype=np.float64)
            _validate_target(d, n)
            object.__setattr__(self, "explicit_target", d)
        elif self.ontology is None:
            raise InvalidArgument("panel needs either an ontology or an explicit d_target")

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def d_target(self) -> np.ndarray:
        if self.explicit_target is not None:
            return self.explicit_target
        return self.ontology.submatrix(self.stage)

    def stage_distance(self, stages: Sequence) -> np.ndarray:
        if self.ontology is None:
            raise InvalidArgument("panel has no stage ontology")
        return self.ontology.submatrix(stages)

    def subset(self, rows) -> "Panel":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        target = None
        if self.explicit_target is not None:
            target = self.explicit_target[np.ix_(rows, rows)]
        return replace(self, features=self.features[rows], donor=self.donor[rows],
                       tissue=self.tissue[rows], branch=self.branch[rows], stage=self.stage[rows],
                       stage_depth=self.stage_depth[rows], explicit_target=target,
                       row_id=self.row_id[rows])

    def with_features(self, features: np.ndarray) -> "Panel":
        features = np.asarray(features, dtype=np.float64)
        if len(features) != self.n:
            raise ShapeError(f"{len(features)} feature rows for a {self.n}-row panel")
        return replace(self, features=features)

    def with_labels(self, **labels) -> "Panel":
        return replace(self, **labels)

    def blocks(self) -> np.ndarray:
        """Donor x tissue block label per row."""
        return np.char.add(np.char.add(self.donor, "|"), self.tissue)


AnchorPanel = Panel


def _validate_target(d: np.ndarray, n: int) -> None:
    if d.shape != (n, n):
        raise ShapeError(f"d_target shape {d.shape} for {n} rows")
    if not np.all(np.isfinite(d)):
        raise InvalidArgument("d_target has non-finite entries")
    if np.any(d < 0):
        raise InvalidArgument("d_target has negative entries")
    if not np.array_equal(d, d.T):
        raise InvalidArgument("d_target is not symmetric")
    if np.any(np.diag(d) != 0):
        raise InvalidArgument("d_target diagonal is not zero")


def aggregate_anchors(cells: Panel) -> Panel:
    """Average cells over donor x tissue x stage groups into anchors."""
    keys = np.char.add(np.char.add(np.char.add(cells.donor, "|"), np.char.add(cells.tissue, "|")), cells.stage)
    uniq, first, inv = np.unique(keys, return_index=True, return_inverse=True)
    counts = np.bincount(inv)
    sums = np.zeros((len(uniq), cells.dim))
    np.add.at(sums, inv, cells.features)
    feats = sums / counts[:, None]
    return Panel(features=feats, donor=cells.donor[first], tissue=cells.tissue[first],
                 branch=cells.branch[first], stage=cells.stage[first],
                 stage_depth=cells.stage_depth[first], ontology=cells.ontology,
                 row_id=uniq)
