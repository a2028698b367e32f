"""Frozen weight tensors and the fixed feature operators built from them.

Every operator is a linear map ``x -> f(x)`` applied row-wise to an ``n x G``
matrix.  The compaction chain is

    drift / single_head -> compact (weighted head sum) -> low_rank -> sparse

and each stage is immutable once constructed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import container
from .errors import InvalidArgument, InvalidRange, NumericalError, ShapeError

KINDS = ("drift", "single_head", "compact", "low_rank", "sparse")
DEFAULT_RANKS = (8, 16, 32, 64)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def _exact_mean(mats: np.ndarray) -> np.ndarray:
    # anchored at the first element so identical inputs give a bitwise-identical mean
    base = mats[0]
    return base + (mats - base).mean(axis=0)


class WeightTensor:
    """Stack of ``n_layers x n_heads`` dense ``G x G`` operators."""

    def __init__(self, weights: np.ndarray):
        w = np.asarray(weights)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"weights must have shape (L, H, G, G), got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise InvalidArgument("weight tensor contains non-finite entries")
        self._w = _frozen(w)

    @property
    def weights(self) -> np.ndarray:
        return self._w

    @property
    def n_layers(self) -> int:
        return self._w.shape[0]

    @property
    def n_heads(self) -> int:
        return self._w.shape[1]

    @property
    def dim(self) -> int:
        return self._w.shape[2]

    def head(self, layer: int, head: int) -> np.ndarray:
        if not (0 <= layer < self.n_layers and 0 <= head < self.n_heads):
            raise InvalidArgument(f"unit ({layer}, {head}) outside {self.n_layers}x{self.n_heads}")
        return self._w[layer, head]

    def units(self) -> list[tuple[int, int]]:
        return [(l, h) for l in range(self.n_layers) for h in range(self.n_heads)]

    def save(self, path: str | Path) -> str:
        meta = {"type": "weight_tensor", "n_layers": self.n_layers,
                "n_heads": self.n_heads, "dim": self.dim}
        return container.save(path, meta, {"weights": self._w})

    @classmethod
    def load(cls, path: str | Path) -> "WeightTensor":
        meta, arrays = container.load(path)
        if meta.get("type") != "weight_tensor":
            raise container.ContainerError(f"{path} holds {meta.get('type')!r}, not a weight tensor")
        return cls(arrays["weights"])

    def __eq__(self, other) -> bool:
        return isinstance(other, WeightTensor) and np.array_equal(self._w, other._w)


@dataclass(frozen=True)
class FeatureOperator:
    """A fixed linear feature map.

    ``arrays`` holds the numeric parameters for the kind:

    - drift: ``A_early``, ``A_mid``, ``A_late``
    - single_head / compact: ``A``
    - low_rank: ``U`` (singular values folded in), ``V``, ``s``
    - sparse: ``read_idx``, ``read_val``, ``write_idx``, ``write_val`` (one row per factor)
    """

    kind: str
    dim: int
    arrays: dict = field(repr=False)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown operator kind {self.kind!r}")
        frozen = {k: _frozen(v) for k, v in self.arrays.items()}
        object.__setattr__(self, "arrays", frozen)

    @property
    def out_dim(self) -> int:
        return 2 * self.dim if self.kind == "drift" else self.dim

    @property
    def rank(self) -> int:
        if self.kind == "low_rank":
            return self.arrays["U"].shape[1]
        if self.kind == "sparse":
            return self.arrays["read_idx"].shape[0]
        raise InvalidArgument(f"{self.kind} operator has no factor rank")

    def apply(self, X: np.ndarray) -> np.ndarray:
        return apply(self, X)

    def dense(self) -> np.ndarray:
        """Explicit ``G x G`` matrix (not defined for drift, which is ``G x 2G``)."""
        a = self.arrays
        if self.kind == "drift":
            return np.hstack([a["A_early"] - a["A_mid"], a["A_mid"] - a["A_late"]])
        if self.kind in ("single_head", "compact"):
            return a["A"]
        U, V = self.factors()
        return U @ V.T

    def factors(self) -> tuple[np.ndarray, np.ndarray]:
        """``(U, V)`` with ``dense = U @ V.T``; sparse factors come back zero-filled."""
        a = self.arrays
        if self.kind == "low_rank":
            return a["U"], a["V"]
        if self.kind == "sparse":
            f = a["read_idx"].shape[0]
            U = np.zeros((self.dim, f))
            V = np.zeros((self.dim, f))
            cols = np.arange(f)[:, None]
            U[a["read_idx"].astype(np.intp), cols] = a["read_val"]
            V[a["write_idx"].astype(np.intp), cols] = a["write_val"]
            return U, V
        raise InvalidArgument(f"{self.kind} operator is not factorized")

    def active_weights(self) -> dict:
        """Loading count and rank-1 product count for a sparse operator."""
        if self.kind != "sparse":
            raise InvalidArgument("active weight counts are defined for sparse operators")
        k_read = self.arrays["read_idx"].shape[1]
        k_write = self.arrays["write_idx"].shape[1]
        f = self.arrays["read_idx"].shape[0]
        return {"loadings": f * (k_read + k_write), "products": f * k_read * k_write}

    def to_bytes(self) -> bytes:
        meta = {"type": "feature_operator", "kind": self.kind, "dim": self.dim, **self.meta}
        return container.dumps(meta, self.arrays)

    def save(self, path: str | Path) -> str:
        blob = self.to_bytes()
        Path(path).write_bytes(blob)
        return container.digest(blob)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FeatureOperator":
        meta, arrays = container.loads(blob)
        if meta.pop("type", None) != "feature_operator":
            raise container.ContainerError("container does not hold a feature operator")
        kind = meta.pop("kind")
        dim = meta.pop("dim")
        return cls(kind=kind, dim=dim, arrays=arrays, meta=meta)

    @classmethod
    def load(cls, path: str | Path) -> "FeatureOperator":
        return cls.from_bytes(Path(path).read_bytes())

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureOperator):
            return NotImplemented
        return (self.kind == other.kind and self.dim == other.dim and self.meta == other.meta
                and self.arrays.keys() == other.arrays.keys()
                and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays))

    __hash__ = None


def _check_X(op: FeatureOperator, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != op.dim:
        raise ShapeError(f"expected {op.dim} columns, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InvalidArgument("feature matrix contains non-finite values")
    return X


def apply(op: FeatureOperator, X: np.ndarray) -> np.ndarray:
    X = _check_X(op, X)
    a = op.arrays
    if op.kind == "drift":
        xe, xm, xl = X @ a["A_early"], X @ a["A_mid"], X @ a["A_late"]
        return np.hstack([xe - xm, xm - xl])
    if op.kind in ("single_head", "compact"):
        return X @ a["A"]
    U, V = op.factors()
    return (X @ U) @ V.T


def _as_layers(rng_like, n_layers: int, name: str) -> list[int]:
    if isinstance(rng_like, range):
        layers = list(rng_like)
    elif isinstance(rng_like, tuple) and len(rng_like) == 2 and all(isinstance(v, int) for v in rng_like):
        layers = list(range(*rng_like))
    else:
        layers = [int(v) for v in rng_like]
    if not layers:
        raise InvalidRange(f"{name} layer range is empty")
    bad = [l for l in layers if not 0 <= l < n_layers]
    if bad:
        raise InvalidRange(f"{name} layer range {bad} outside [0, {n_layers})")
    return layers


def default_blocks(n_layers: int) -> tuple[list[int], list[int], list[int]]:
    """Early/mid/late thirds of the layer range (overlapping when fewer than 3 layers)."""
    if n_layers >= 3:
        return tuple(list(map(int, b)) for b in np.array_split(np.arange(n_layers), 3))
    return [0], list(range(n_layers)), [n_layers - 1]


def build_drift_operator(tensor: WeightTensor, early=None, mid=None, late=None) -> FeatureOperator:
    """Pooled drift map ``[(x A_early - x A_mid) ; (x A_mid - x A_late)]``.

    Each block matrix is the mean of every head in every layer of its range.
    Ranges may be ``range`` objects, ``(start, stop)`` tuples or explicit layer lists.
    """
    d_early, d_mid, d_late = default_blocks(tensor.n_layers)
    blocks = {}
    for name, given, dflt in (("early", early, d_early), ("mid", mid, d_mid), ("late", late, d_late)):
        layers = _as_layers(dflt if given is None else given, tensor.n_layers, name)
        stack = tensor.weights[layers].reshape(-1, tensor.dim, tensor.dim)
        blocks[name] = (layers, _exact_mean(stack))
    return FeatureOperator(
        kind="drift",
        dim=tensor.dim,
        arrays={f"A_{k}": v[1] for k, v in blocks.items()},
        meta={"blocks": {k: v[0] for k, v in blocks.items()}},
    )


def single_head(tensor: WeightTensor, layer: int, head: int) -> FeatureOperator:
    return FeatureOperator(kind="single_head", dim=tensor.dim,
                           arrays={"A": tensor.head(layer, head)},
                           meta={"unit": [int(layer), int(head)]})


def compose_compact(tensor: WeightTensor, ranked_units: Sequence[tuple[int, int]],
                    weights: Sequence[float]) -> FeatureOperator:
    units = [tuple(int(v) for v in u) for u in ranked_units]
    alphas = [float(a) for a in weights]
    if len(units) != len(alphas):
        raise InvalidArgument(f"{len(units)} units but {len(alphas)} weights")
    if not units:
        raise InvalidArgument("compact operator needs at least one unit")
    A = np.zeros((tensor.dim, tensor.dim))
    for (l, h), alpha in zip(units, alphas):
        A += alpha * tensor.head(l, h)
    return FeatureOperator(kind="compact", dim=tensor.dim, arrays={"A": A},
                           meta={"units": [list(u) for u in units], "alphas": alphas})


def _svd(A: np.ndarray):
    attempts = 0
    for driver in ("gesdd", "gesvd"):
        attempts += 1
        try:
            import scipy.linalg

            return scipy.linalg.svd(A, full_matrices=False, lapack_driver=driver)
        except (np.linalg.LinAlgError, ValueError):
            continue
    raise NumericalError(f"SVD did not converge after {attempts} LAPACK attempts")


def truncate_svd(op: FeatureOperator, r: int) -> FeatureOperator:
    """Best rank-``r`` approximation ``U_r V_r^T`` of a compact or single-head operator."""
    if op.kind not in ("compact", "single_head"):
        raise InvalidArgument(f"cannot truncate a {op.kind} operator")
    r = int(r)
    if not 1 <= r <= op.dim:
        raise InvalidArgument(f"rank {r} outside [1, {op.dim}]")
    A = op.arrays["A"]
    U, s, Vt = _svd(A)
    err = float(np.sqrt(np.sum(s[r:] ** 2)))
    meta = {"parent_kind": op.kind, "parent": op.meta, "rank": r, "frobenius_error": err}
    return FeatureOperator(kind="low_rank", dim=op.dim,
                           arrays={"U": U[:, :r] * s[:r], "V": Vt[:r].T, "s": s[:r]},
                           meta=meta)


def top_k_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest ``|values|``; ties go to the lowest index. Sorted ascending."""
    order = np.argsort(-np.abs(values), kind="stable")
    return np.sort(order[:k])


def prune_sparse(op: FeatureOperator, keep_factors: Iterable[int], k_read: int,
                 k_write: int) -> FeatureOperator:
    if op.kind != "low_rank":
        raise InvalidArgument(f"can only prune a low_rank operator, got {op.kind}")
    keep = [int(f) for f in keep_factors]
    r = op.rank
    if not keep:
        raise InvalidArgument("keep_factors is empty")
    if any(not 0 <= f < r for f in keep):
        raise InvalidArgument(f"factor index outside [0, {r})")
    if len(set(keep)) != len(keep):
        raise InvalidArgument("duplicate factor index")
    if k_read < 1 or k_write < 1 or k_read > op.dim or k_write > op.dim:
        raise InvalidArgument(f"k_read/k_write must lie in [1, {op.dim}]")
    U, V = op.arrays["U"], op.arrays["V"]
    read_idx = np.array([top_k_indices(U[:, f], k_read) for f in keep])
    write_idx = np.array([top_k_indices(V[:, f], k_write) for f in keep])
    read_val = np.array([U[idx, f] for idx, f in zip(read_idx, keep)])
    write_val = np.array([V[idx, f] for idx, f in zip(write_idx, keep)])
    pruned = sorted(set(range(r)) - set(keep))
    meta = {"parent_rank": r, "keep_factors": keep, "pruned_factors": pruned,
            "k_read": int(k_read), "k_write": int(k_write)}
    return FeatureOperator(kind="sparse", dim=op.dim,
                           arrays={"read_idx": read_idx.astype(np.float64), "read_val": read_val,
                                   "write_idx": write_idx.astype(np.float64), "write_val": write_val},
                           meta=meta)


def keep_only(op: FeatureOperator, factors: Iterable[int]) -> FeatureOperator:
    """Low-rank operator with every factor outside ``factors`` zeroed (shape unchanged)."""
    if op.kind not in ("low_rank", "sparse"):
        raise InvalidArgument(f"{op.kind} operator has no factors to ablate")
    U, V = op.factors()
    keep = sorted({int(f) for f in factors})
    if any(not 0 <= f < U.shape[1] for f in keep):
        raise InvalidArgument(f"factor index outside [0, {U.shape[1]})")
    mask = np.zeros(U.shape[1])
    mask[keep] = 1.0
    meta = {"parent": op.meta, "kept": keep}
    return FeatureOperator(kind="low_rank", dim=op.dim,
                           arrays={"U": U * mask, "V": V,
                                   "s": np.linalg.norm(U, axis=0) * mask},
                           meta=meta)


def zero_factor(op: FeatureOperator, factor: int) -> FeatureOperator:
    r = op.rank
    return keep_only(op, [f for f in range(r) if f != int(factor)])
