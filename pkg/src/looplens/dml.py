"""Double machine learning for the partially linear model.

``Y = g(X) + theta D + e`` and ``D = m(X) + v``. Both nuisance functions are
fit out of fold with boosted trees; theta is the least-squares slope of the
outcome residuals on the treatment residuals.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import stats

from ._seeding import derive_seed
from .gbt import GbtParams, fit_gbt

PROPENSITY_CLIP = (0.01, 0.99)


class DmlError(ValueError):
    pass


@dataclass(frozen=True)
class DmlSpec:
    outcome: str
    treatment: str
    covariates: tuple[str, ...]
    folds: int = 5
    gbt: GbtParams = field(default_factory=GbtParams)
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.folds < 2:
            raise DmlError(f"folds must be >= 2, got {self.folds}")
        if not self.covariates:
            raise DmlError("at least one covariate is required")
        for label in (self.outcome, self.treatment):
            if label in self.covariates:
                raise DmlError(f"{label!r} cannot be both a covariate and the outcome/treatment")
        if self.outcome == self.treatment:
            raise DmlError("outcome and treatment must differ")


@dataclass(frozen=True)
class CrossFit:
    y_res: np.ndarray
    d_res: np.ndarray
    fold: np.ndarray
    r2_g: float
    r2_m: float
    binary: bool


@dataclass(frozen=True)
class DmlFit:
    treatment: str
    theta: float
    se: float
    t: float
    p_value: float
    effect_kind: str  # "ATE" for binary treatment, "MTE" for continuous
    n: int
    y_res: np.ndarray = field(repr=False)
    d_res: np.ndarray = field(repr=False)
    r2_g: float = float("nan")
    r2_m: float = float("nan")


@dataclass(frozen=True)
class GroupFit:
    group: str
    lower: float
    upper: float
    n: int
    fit: DmlFit


def is_binary(d: np.ndarray) -> bool:
    vals = np.unique(d)
    return vals.size == 2 and vals[0] == 0 and vals[1] == 1


def _columns(data: pd.DataFrame, spec: DmlSpec):
    missing = [c for c in (spec.outcome, spec.treatment, *spec.covariates) if c not in data.columns]
    if missing:
        raise DmlError(f"missing columns: {missing}")
    y = data[spec.outcome].to_numpy(dtype=float)
    d = data[spec.treatment].to_numpy(dtype=float)
    X = data[list(spec.covariates)].to_numpy(dtype=float)
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(d)) and np.all(np.isfinite(X))):
        raise DmlError("non-finite values in outcome, treatment or covariates")
    return y, d, X


def fold_ids(n: int, folds: int, seed: int) -> np.ndarray:
    perm = np.random.default_rng(derive_seed(seed, "folds")).permutation(n)
    ids = np.empty(n, dtype=np.int64)
    for k, part in enumerate(np.array_split(perm, folds)):
        ids[part] = k
    return ids


def _oos_r2(target: np.ndarray, resid: np.ndarray) -> float:
    sst = float(np.sum((target - target.mean()) ** 2))
    return 1.0 - float(resid @ resid) / sst if sst > 0 else float("nan")


def crossfit_residuals(data: pd.DataFrame, spec: DmlSpec) -> CrossFit:
    """Out-of-fold residuals ``Y - g(X)`` and ``D - m(X)``."""
    y, d, X = _columns(data, spec)
    n = y.shape[0]
    K = spec.folds
    if n < 10 * K:
        raise DmlError(f"n={n} is too small for {K} folds (need n >= {10 * K}); use fewer folds")
    binary = is_binary(d)
    fold = fold_ids(n, K, spec.seed)
    min_train = n - np.bincount(fold).max()
    if min_train < 2 * spec.gbt.min_samples_leaf:
        raise DmlError("training folds too small for the learner; use fewer folds")

    def work(k: int):
        train, test = fold != k, fold == k
        g = fit_gbt(X[train], y[train], spec.gbt, seed=derive_seed(spec.seed, "g", k))
        m = fit_gbt(X[train], d[train], spec.gbt, seed=derive_seed(spec.seed, "m", k))
        return k, g.predict(X[test]), m.predict(X[test])

    if spec.threads > 1:
        with ThreadPoolExecutor(max_workers=spec.threads) as pool:
            results = list(pool.map(work, range(K)))
    else:
        results = [work(k) for k in range(K)]

    g_hat = np.empty(n)
    m_hat = np.empty(n)
    for k, gp, mp in results:
        g_hat[fold == k] = gp
        m_hat[fold == k] = mp
    if binary:
        m_hat = np.clip(m_hat, *PROPENSITY_CLIP)
    y_res = y - g_hat
    d_res = d - m_hat
    return CrossFit(y_res, d_res, fold, _oos_r2(y, y_res), _oos_r2(d, d_res), binary)


def estimate_theta(y_res, d_res, effect_kind: str = "MTE", treatment: str = "D") -> DmlFit:
    """Orthogonalised slope with a heteroskedasticity-robust standard error."""
    y_res = np.asarray(y_res, dtype=float)
    d_res = np.asarray(d_res, dtype=float)
    sdd = float(d_res @ d_res)
    if not sdd > 0:
        raise DmlError("no residual treatment variation")
    theta = float(d_res @ y_res) / sdd
    u = y_res - theta * d_res
    se = math.sqrt(float(np.sum(d_res**2 * u**2))) / sdd
    if se > 0:
        t = theta / se
        p = float(2.0 * stats.norm.sf(abs(t)))
    else:
        t = math.copysign(math.inf, theta) if theta else float("nan")
        p = 0.0 if theta else float("nan")
    return DmlFit(treatment, theta, se, t, p, effect_kind, y_res.shape[0], y_res, d_res)


def run_dml(data: pd.DataFrame, spec: DmlSpec) -> DmlFit:
    cf = crossfit_residuals(data, spec)
    fit = estimate_theta(cf.y_res, cf.d_res, "ATE" if cf.binary else "MTE", spec.treatment)
    return replace(fit, r2_g=cf.r2_g, r2_m=cf.r2_m)


def group_edges(values: np.ndarray, quantiles: int | None = None, edges: Sequence[float] | None = None) -> np.ndarray:
    if (quantiles is None) == (edges is None):
        raise DmlError("give exactly one of quantiles or edges")
    if quantiles is not None:
        if quantiles < 1:
            raise DmlError("quantiles must be >= 1")
        return np.quantile(values, np.linspace(0.0, 1.0, quantiles + 1))
    e = np.asarray(edges, dtype=float)
    if e.size < 2 or np.any(np.diff(e) < 0):
        raise DmlError("edges must be nondecreasing with at least two values")
    return e


def cate_by_groups(
    data: pd.DataFrame,
    spec: DmlSpec,
    by: str,
    quantiles: int | None = None,
    edges: Sequence[float] | None = None,
    strict: bool = False,
) -> list[GroupFit]:
    """Run DML separately inside each bin of ``by``.

    Bins are ``[lower, upper)`` with the last one closed. With ``quantiles``
    the edges are sample quantiles of ``by``. Bins smaller than ``10 * folds``
    are skipped with a warning (an error when ``strict``).
    """
    if by not in data.columns:
        raise DmlError(f"missing grouping column {by!r}")
    values = data[by].to_numpy(dtype=float)
    e = group_edges(values, quantiles, edges)
    out = []
    n_bins = e.size - 1
    for b in range(n_bins):
        lo, hi = float(e[b]), float(e[b + 1])
        if b == n_bins - 1:
            mask = (values >= lo) & (values <= hi)
        else:
            mask = (values >= lo) & (values < hi)
        label = f"Q{b + 1}" if quantiles is not None else f"[{lo:g}, {hi:g}{']' if b == n_bins - 1 else ')'}"
        size = int(mask.sum())
        if size < 10 * spec.folds:
            msg = f"group {label} of {by!r} has {size} rows (< {10 * spec.folds}); skipped"
            if strict:
                raise DmlError(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            continue
        sub = data.loc[mask].reset_index(drop=True)
        out.append(GroupFit(label, lo, hi, size, run_dml(sub, spec)))
    return out


def naive_ols_slope(y, d) -> float:
    """Slope of y on d with intercept; the unadjusted comparison estimate."""
    y = np.asarray(y, dtype=float)
    d = np.asarray(d, dtype=float)
    dc = d - d.mean()
    return float(dc @ (y - y.mean())) / float(dc @ dc)
