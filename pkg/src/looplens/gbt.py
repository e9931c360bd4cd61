"""Least-squares gradient boosting with depth-limited regression trees.

Features are pre-binned (at most ``max_bins`` candidate thresholds per
feature) and each tree is grown level by level from gradient histograms.
Trees are stored in heap layout (children of ``i`` at ``2i+1`` / ``2i+2``);
``feature == -1`` marks a leaf. The inner loops are compiled with numba and
accumulate in a fixed order, so fits are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np


class GbtError(ValueError):
    pass


@dataclass(frozen=True)
class GbtParams:
    n_trees: int = 200
    max_depth: int = 3
    learning_rate: float = 0.1
    min_samples_leaf: int = 5
    subsample: float = 1.0
    max_bins: int = 255

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_samples_leaf < 1 or self.max_bins < 2:
            raise GbtError(f"tree-size parameters must be positive: {self}")
        if not 0 < self.learning_rate <= 1:
            raise GbtError(f"learning_rate must be in (0, 1], got {self.learning_rate}")
        if not 0 < self.subsample <= 1:
            raise GbtError(f"subsample must be in (0, 1], got {self.subsample}")


def _bin_edges(col: np.ndarray, max_bins: int) -> np.ndarray:
    uniq = np.unique(col)
    if uniq.size <= max_bins:
        return (uniq[:-1] + uniq[1:]) / 2.0
    qs = np.quantile(col, np.linspace(0.0, 1.0, max_bins + 1)[1:-1])
    return np.unique(qs)


@numba.njit(cache=True)
def _grow_tree(Xb, r, use, nb, depth, msl, lr, feat, kbin, value, node):
    """Fit one tree to residuals ``r``; fills feat/kbin/value, leaves leaf ids in ``node``."""
    n, p = Xb.shape
    n_heap = feat.shape[0]
    for i in range(n):
        node[i] = 0
    for h in range(n_heap):
        feat[h] = -1
        kbin[h] = 0
        value[h] = 0.0
    open_node = np.zeros(n_heap, dtype=np.bool_)
    open_node[0] = True
    for level in range(depth):
        off = 2**level - 1
        n_level = 2**level
        G = np.zeros((n_level, p, nb))
        C = np.zeros((n_level, p, nb))
        ss = np.zeros(n_level)
        any_open = False
        for i in range(n):
            loc = node[i] - off
            if loc < 0 or not open_node[node[i]] or not use[i]:
                continue
            any_open = True
            ri = r[i]
            ss[loc] += ri * ri
            for j in range(p):
                b = Xb[i, j]
                G[loc, j, b] += ri
                C[loc, j, b] += 1.0
        if not any_open:
            break
        split_any = False
        for loc in range(n_level):
            h = off + loc
            if not open_node[h]:
                continue
            gt = 0.0
            ct = 0.0
            for b in range(nb):
                gt += G[loc, 0, b]
                ct += C[loc, 0, b]
            best = -np.inf
            bj = -1
            bk = -1
            if ct >= 2 * msl:
                base = gt * gt / ct
                for j in range(p):
                    gl = 0.0
                    cl = 0.0
                    for k in range(nb - 1):
                        gl += G[loc, j, k]
                        cl += C[loc, j, k]
                        cr = ct - cl
                        if cl < msl or cr < msl:
                            continue
                        gr = gt - gl
                        gain = gl * gl / cl + gr * gr / cr - base
                        if gain > best:
                            best = gain
                            bj = j
                            bk = k
            if bj >= 0 and best > 0.0 and best > 1e-12 * ss[loc]:
                feat[h] = bj
                kbin[h] = bk
                open_node[2 * h + 1] = True
                open_node[2 * h + 2] = True
                split_any = True
            open_node[h] = False
        if not split_any:
            break
        for i in range(n):
            h = node[i]
            if h >= off and h < off + n_level and feat[h] >= 0:
                if Xb[i, feat[h]] <= kbin[h]:
                    node[i] = 2 * h + 1
                else:
                    node[i] = 2 * h + 2
    sums = np.zeros(n_heap)
    cnts = np.zeros(n_heap)
    for i in range(n):
        if use[i]:
            sums[node[i]] += r[i]
            cnts[node[i]] += 1.0
    for h in range(n_heap):
        if cnts[h] > 0:
            value[h] = lr * sums[h] / cnts[h]


@numba.njit(cache=True)
def _boost(Xb, y, base, samples, nb, n_trees, depth, msl, lr):
    n = y.shape[0]
    n_heap = 2 ** (depth + 1) - 1
    feats = np.full((n_trees, n_heap), -1, dtype=np.int64)
    kbins = np.zeros((n_trees, n_heap), dtype=np.int64)
    values = np.zeros((n_trees, n_heap))
    F = np.full(n, base)
    r = np.empty(n)
    node = np.zeros(n, dtype=np.int64)
    all_rows = np.ones(n, dtype=np.bool_)
    for t in range(n_trees):
        for i in range(n):
            r[i] = y[i] - F[i]
        use = samples[t] if samples.shape[0] > 0 else all_rows
        _grow_tree(Xb, r, use, nb, depth, msl, lr, feats[t], kbins[t], values[t], node)
        for i in range(n):
            F[i] = F[i] + values[t, node[i]]
    return feats, kbins, values


@numba.njit(cache=True)
def _predict(X, base, feats, thrs, values, depth):
    n = X.shape[0]
    out = np.full(n, base)
    for t in range(feats.shape[0]):
        for i in range(n):
            h = 0
            for _ in range(depth):
                f = feats[t, h]
                if f < 0:
                    break
                if X[i, f] <= thrs[t, h]:
                    h = 2 * h + 1
                else:
                    h = 2 * h + 2
            out[i] = out[i] + values[t, h]
    return out


@dataclass
class GradientBoostedTrees:
    params: GbtParams = field(default_factory=GbtParams)
    seed: int = 0
    base_score: float = 0.0
    n_features: int = 0
    features: np.ndarray | None = field(default=None, repr=False)
    thresholds: np.ndarray | None = field(default=None, repr=False)
    values: np.ndarray | None = field(default=None, repr=False)

    def fit(self, X, y) -> "GradientBoostedTrees":
        X = np.asarray(X, dtype=float)
        y = np.ascontiguousarray(np.asarray(y, dtype=float).ravel())
        if X.ndim == 1:
            X = X[:, None]
        n, p = X.shape
        prm = self.params
        if y.shape[0] != n:
            raise GbtError(f"X has {n} rows but y has {y.shape[0]}")
        if n < 2 * prm.min_samples_leaf:
            raise GbtError(f"need at least {2 * prm.min_samples_leaf} samples, got {n}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise GbtError("non-finite training data")

        edges = [_bin_edges(X[:, j], prm.max_bins) for j in range(p)]
        nb = max(e.size for e in edges) + 1
        Xb = np.ascontiguousarray(
            np.column_stack([np.searchsorted(e, X[:, j], side="left") for j, e in enumerate(edges)]).astype(np.int64)
        )
        if prm.subsample < 1.0:
            rng = np.random.default_rng(self.seed)
            n_sub = max(2 * prm.min_samples_leaf, int(round(prm.subsample * n)))
            samples = np.zeros((prm.n_trees, n), dtype=np.bool_)
            for t in range(prm.n_trees):
                samples[t, rng.choice(n, size=n_sub, replace=False)] = True
        else:
            samples = np.zeros((0, n), dtype=np.bool_)

        self.n_features = p
        self.base_score = float(np.mean(y))
        feats, kbins, values = _boost(
            Xb, y, self.base_score, samples, nb, prm.n_trees, prm.max_depth, prm.min_samples_leaf, prm.learning_rate
        )
        padded = np.full((p, nb), np.inf)
        for j, e in enumerate(edges):
            padded[j, : e.size] = e
        self.features = feats
        self.thresholds = np.where(feats >= 0, padded[np.maximum(feats, 0), kbins], 0.0)
        self.values = values
        return self

    @property
    def n_trees(self) -> int:
        return 0 if self.features is None else self.features.shape[0]

    def predict(self, X) -> np.ndarray:
        if self.features is None:
            raise GbtError("model is not fitted")
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[1] != self.n_features:
            raise GbtError(f"expected {self.n_features} features, got {X.shape[1]}")
        return _predict(np.ascontiguousarray(X), self.base_score, self.features, self.thresholds, self.values, self.params.max_depth)


def fit_gbt(X, y, params: GbtParams | None = None, seed: int = 0) -> GradientBoostedTrees:
    """Fit a least-squares boosted tree ensemble; deterministic given ``seed``."""
    return GradientBoostedTrees(params or GbtParams(), seed).fit(X, y)
