"""Spatial weights, global Moran's I and variance inflation factors."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import shapely
from scipy import sparse
from scipy.spatial import cKDTree

from ._seeding import child_rng

PERM_CHUNK = 128


class SpatialStatsError(ValueError):
    pass


class CollinearityError(SpatialStatsError):
    def __init__(self, column: str, message: str | None = None):
        super().__init__(message or f"exact collinearity: column {column!r} is a linear combination of the others")
        self.column = column


@dataclass(frozen=True)
class WeightsMatrix:
    """Sparse spatial weights with zero diagonal.

    ``islands`` lists units without any neighbour; their rows stay empty.
    """

    sparse: sparse.csr_matrix
    row_standardized: bool = False
    islands: tuple[int, ...] = field(default=())

    def __post_init__(self):
        m = sparse.csr_matrix(self.sparse, dtype=float)
        m.eliminate_zeros()
        m.sort_indices()
        if m.shape[0] != m.shape[1]:
            raise SpatialStatsError(f"weights must be square, got {m.shape}")
        if np.any(m.diagonal() != 0):
            raise SpatialStatsError("weights must have a zero diagonal")
        if m.nnz and m.data.min() < 0:
            raise SpatialStatsError("weights must be nonnegative")
        if self.row_standardized:
            sums = np.asarray(m.sum(axis=1)).ravel()
            nonempty = np.diff(m.indptr) > 0
            if np.any(np.abs(sums[nonempty] - 1.0) > 1e-12):
                raise SpatialStatsError("row_standardized weights must have rows summing to 1")
        object.__setattr__(self, "sparse", m)
        if not self.islands:
            empty = np.flatnonzero(np.diff(m.indptr) == 0)
            object.__setattr__(self, "islands", tuple(int(i) for i in empty))

    @property
    def n(self) -> int:
        return self.sparse.shape[0]

    def neighbors(self, i: int) -> list[tuple[int, float]]:
        a, b = self.sparse.indptr[i], self.sparse.indptr[i + 1]
        return list(zip(self.sparse.indices[a:b].tolist(), self.sparse.data[a:b].tolist()))

    def to_dense(self) -> np.ndarray:
        return self.sparse.toarray()

    @property
    def s0(self) -> float:
        return float(self.sparse.sum())

    def permuted(self, order: Sequence[int]) -> "WeightsMatrix":
        """Weights for units re-indexed so that new unit ``k`` is old ``order[k]``."""
        order = np.asarray(order)
        return WeightsMatrix(self.sparse[order][:, order], self.row_standardized)

    @cached_property
    def eigenvalue_bounds(self) -> tuple[float, float]:
        """Smallest and largest real parts of the spectrum."""
        ev = np.linalg.eigvals(self.to_dense()).real
        return float(ev.min()), float(ev.max())

    def to_triplets_csv(self, header: str = "") -> str:
        coo = self.sparse.tocoo()
        lines = [header + "i,j,w"]
        lines += [f"{i},{j},{w!r}" for i, j, w in zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist())]
        return "\n".join(lines) + "\n"


def row_standardize(w: WeightsMatrix) -> WeightsMatrix:
    if w.row_standardized:
        return w
    m = w.sparse
    sums = np.asarray(m.sum(axis=1)).ravel()
    scale = np.divide(1.0, sums, out=np.zeros_like(sums), where=sums > 0)
    return WeightsMatrix(sparse.diags(scale) @ m, row_standardized=True)


def _binary(n: int, i: np.ndarray, j: np.ndarray) -> sparse.csr_matrix:
    keep = i != j
    m = sparse.coo_matrix((np.ones(int(keep.sum())), (i[keep], j[keep])), shape=(n, n)).tocsr()
    m.data[:] = 1.0
    return m


def parse_weights_mode(text: str) -> tuple[str, float | None]:
    """``"knn:5"`` -> ``("knn", 5)``, ``"queen"`` -> ``("queen", None)``."""
    name, _, arg = text.partition(":")
    name = name.strip().lower()
    if name not in ("knn", "queen", "queen_contiguity", "distance_band"):
        raise SpatialStatsError(f"unknown weights mode {text!r}")
    if name == "queen_contiguity":
        name = "queen"
    if name == "knn":
        return name, int(arg) if arg else 5
    if name == "distance_band":
        if not arg:
            raise SpatialStatsError("distance_band needs a threshold, e.g. distance_band:1000")
        return name, float(arg)
    return name, None


def build_weights(
    mode: str,
    *,
    coords: np.ndarray | None = None,
    polygons: Sequence | None = None,
    k: int = 5,
    band: float | None = None,
    standardize: bool = True,
) -> WeightsMatrix:
    """Binary adjacency for ``mode`` (``knn``, ``queen``, ``distance_band``).

    knn links are symmetrised by union. ``coords`` are planar (projected)
    positions; ``queen`` needs ``polygons`` and links any two that share a
    boundary point.
    """
    if ":" in mode:
        mode, arg = parse_weights_mode(mode)
        if mode == "knn":
            k = int(arg)
        elif mode == "distance_band":
            band = arg
    if mode == "queen_contiguity":
        mode = "queen"

    if mode == "queen":
        if polygons is None:
            raise SpatialStatsError("queen contiguity needs polygons")
        geoms = np.asarray(list(polygons), dtype=object)
        n = len(geoms)
        if n < 2:
            raise SpatialStatsError("need at least 2 units")
        tree = shapely.STRtree(geoms)
        i, j = tree.query(geoms, predicate="intersects")
        adj = _binary(n, i, j)
    else:
        if coords is None:
            raise SpatialStatsError(f"{mode} weights need coordinates")
        pts = np.asarray(coords, dtype=float)
        n = len(pts)
        if n < 2:
            raise SpatialStatsError("need at least 2 units")
        tree = cKDTree(pts)
        if mode == "knn":
            if not 0 < k < n:
                raise SpatialStatsError(f"knn needs 0 < k < n, got k={k}, n={n}")
            _, nbr = tree.query(pts, k=k + 1)
            # the point itself is usually column 0, but exact duplicates can reorder it
            rows = np.repeat(np.arange(n), k + 1)
            adj = _binary(n, rows, nbr.ravel())
            counts = np.diff(adj.indptr)
            if np.any(counts > k):
                trimmed = []
                for r in range(n):
                    others = [c for c in nbr[r].tolist() if c != r][:k]
                    trimmed += [(r, c) for c in others]
                ti, tj = (np.array(v) for v in zip(*trimmed))
                adj = _binary(n, ti, tj)
            adj = ((adj + adj.T) > 0).astype(float).tocsr()
        elif mode == "distance_band":
            if band is None or not band > 0:
                raise SpatialStatsError("distance_band needs a positive threshold")
            pairs = tree.query_pairs(band, output_type="ndarray")
            if len(pairs):
                i = np.r_[pairs[:, 0], pairs[:, 1]]
                j = np.r_[pairs[:, 1], pairs[:, 0]]
            else:
                i = j = np.zeros(0, dtype=np.int64)
            adj = _binary(n, i, j)
        else:
            raise SpatialStatsError(f"unknown weights mode {mode!r}")

    w = WeightsMatrix(adj)
    return row_standardize(w) if standardize else w


@dataclass(frozen=True)
class MoranResult:
    I: float
    expected_null: float
    p_value: float | None = None
    n_permutations: int = 0
    seed: int | None = None

    def to_json(self) -> dict:
        return {"I": self.I, "expected": self.expected_null, "p": self.p_value, "n_perm": self.n_permutations, "seed": self.seed}


def _moran_parts(y, W: WeightsMatrix) -> tuple[np.ndarray, float]:
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != W.n:
        raise SpatialStatsError(f"length of y ({y.shape[0]}) does not match weights ({W.n})")
    if not np.all(np.isfinite(y)):
        raise SpatialStatsError("y contains non-finite values")
    if np.ptp(y) == 0:
        raise SpatialStatsError("zero variance: y is constant")
    s0 = W.s0
    if s0 == 0:
        raise SpatialStatsError("sum of weights is zero")
    return y - y.mean(), s0


def morans_i(y, W: WeightsMatrix) -> MoranResult:
    z, s0 = _moran_parts(y, W)
    n = z.shape[0]
    stat = n / s0 * float(z @ (W.sparse @ z)) / float(z @ z)
    return MoranResult(stat, -1.0 / (n - 1))


def morans_permutation_test(y, W: WeightsMatrix, n_perm: int = 999, seed: int = 0, threads: int = 1) -> MoranResult:
    """Two-sided permutation test around E[I] = -1/(n-1).

    Permutations are drawn in fixed-size chunks, each from its own derived
    seed, so any ``threads`` value gives the same p-value.
    """
    if n_perm < 19:
        raise SpatialStatsError(f"n_perm must be >= 19, got {n_perm}")
    z, s0 = _moran_parts(y, W)
    n = z.shape[0]
    denom = float(z @ z)
    observed = n / s0 * float(z @ (W.sparse @ z)) / denom
    expected = -1.0 / (n - 1)

    def chunk(c: int) -> np.ndarray:
        m = min(PERM_CHUNK, n_perm - c * PERM_CHUNK)
        rng = child_rng(seed, "moran", c)
        Z = rng.permuted(np.tile(z, (m, 1)), axis=1)
        lag = (W.sparse @ Z.T).T
        return n / s0 * np.einsum("ij,ij->i", Z, lag) / denom

    chunks = range(-(-n_perm // PERM_CHUNK))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            sims = np.concatenate(list(pool.map(chunk, chunks)))
    else:
        sims = np.concatenate([chunk(c) for c in chunks])
    dev = abs(observed - expected)
    extreme = int(np.sum(np.abs(sims - expected) >= dev - 1e-12 * max(1.0, dev)))
    p = (1 + extreme) / (n_perm + 1)
    return MoranResult(observed, expected, p, n_perm, seed)


@dataclass(frozen=True)
class VifResult:
    names: tuple[str, ...]
    vif: np.ndarray
    r2: np.ndarray

    @property
    def mean_vif(self) -> float:
        return float(np.mean(self.vif))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.vif.tolist()))


def vif(X, names: Sequence[str] | None = None) -> VifResult:
    """Variance inflation factor of each column against all others (with intercept)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise SpatialStatsError("X must be 2-D")
    n, p = X.shape
    names = tuple(names) if names is not None else tuple(f"x{j + 1}" for j in range(p))
    if len(names) != p:
        raise SpatialStatsError("names length does not match number of columns")
    if p < 2 or n <= p:
        raise SpatialStatsError(f"vif needs n > p >= 2, got n={n}, p={p}")
    for j in range(p):
        if np.ptp(X[:, j]) == 0:
            raise CollinearityError(names[j], f"column {names[j]!r} is constant")

    r2 = np.empty(p)
    for j in range(p):
        target = X[:, j]
        others = np.column_stack([np.ones(n), np.delete(X, j, axis=1)])
        coef, *_ = np.linalg.lstsq(others, target, rcond=None)
        resid = target - others @ coef
        sst = float(np.sum((target - target.mean()) ** 2))
        r2[j] = 1.0 - float(resid @ resid) / sst
        if 1.0 - r2[j] <= 1e-10:
            raise CollinearityError(names[j])
    return VifResult(names, 1.0 / (1.0 - r2), r2)
