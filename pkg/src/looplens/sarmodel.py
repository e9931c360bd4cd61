"""Maximum-likelihood spatial lag (SAR) model, ``y = rho W y + X beta + e``.

rho is found by golden-section search on the concentrated log-likelihood;
standard errors come from a finite-difference Hessian of the full
likelihood in ``(beta, rho, sigma2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .spatialstats import WeightsMatrix

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
BOUND_EPS = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


class SarError(ValueError):
    pass


@dataclass(frozen=True)
class ModelMatrix:
    """Outcome and design; the first column of ``X`` is expected to be the intercept."""

    y: np.ndarray
    X: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise SarError(f"shape mismatch: y {y.shape}, X {X.shape}")
        if len(self.names) != X.shape[1]:
            raise SarError("names length does not match X columns")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise SarError("non-finite entries in model data")
        if not y.shape[0] > X.shape[1] + 1:
            raise SarError(f"need n > p + 1, got n={y.shape[0]}, p={X.shape[1]}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "names", tuple(self.names))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @classmethod
    def with_intercept(cls, y, X, names: Sequence[str], intercept: str = "Constant") -> "ModelMatrix":
        X = np.asarray(X, dtype=float).reshape(len(y), -1)
        return cls(y, np.column_stack([np.ones(len(y)), X]), (intercept, *names))


@dataclass(frozen=True)
class SarFit:
    rho: float
    beta: np.ndarray
    sigma2: float
    se: np.ndarray  # beta..., rho
    z: np.ndarray
    p_values: np.ndarray
    pseudo_r2: float
    log_likelihood: float
    n: int
    names: tuple[str, ...]
    bounds: tuple[float, float]

    def coef_table(self) -> list[tuple[str, float, float, float, float]]:
        coefs = np.r_[self.beta, self.rho]
        labels = (*self.names, "SpatialLag")
        return [
            (name, float(c), float(s), float(zv), float(pv))
            for name, c, s, zv, pv in zip(labels, coefs, self.se, self.z, self.p_values)
        ]


def rho_bounds(W: WeightsMatrix) -> tuple[float, float]:
    """Open interval (1/lambda_min, 1/lambda_max) of admissible rho values.

    A spectrum without negative (positive) eigenvalues leaves that side at
    -1 (+1).
    """
    lo_ev, hi_ev = W.eigenvalue_bounds
    tol = 1e-12
    lo = 1.0 / lo_ev if lo_ev < -tol else -1.0
    hi = 1.0 / hi_ev if hi_ev > tol else 1.0
    return lo, hi


def _ols(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.linalg.solve(X.T @ X, X.T @ y)


def _check_design(X: np.ndarray) -> None:
    xtx = X.T @ X
    if np.linalg.matrix_rank(X) < X.shape[1] or np.linalg.cond(xtx) > 1e14:
        raise SarError("singular X'X: collinear design")


class _LogDet:
    """ln|I - rho W| via dense LU, memoised per rho."""

    def __init__(self, W: WeightsMatrix):
        self.Wd = W.to_dense()
        self.eye = np.eye(W.n)
        self.cache: dict[float, float] = {}

    def __call__(self, rho: float) -> float:
        val = self.cache.get(rho)
        if val is None:
            sign, val = np.linalg.slogdet(self.eye - rho * self.Wd)
            if sign <= 0:
                val = -np.inf
            self.cache[rho] = val
        return val


def golden_section_max(f, a: float, b: float, tol: float = 1e-10, max_iter: int = 200) -> float:
    if not b > a:
        raise SarError(f"search bracket collapsed: [{a}, {b}]")
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def concentrated_loglik(rho: float, data: ModelMatrix, W: WeightsMatrix, _logdet=None, _parts=None) -> float:
    """Profile log-likelihood of rho with beta and sigma2 concentrated out."""
    n = data.n
    if _parts is None:
        Wy = W.sparse @ data.y
        _parts = (data.y - data.X @ _ols(data.X, data.y), Wy - data.X @ _ols(data.X, Wy))
    e0, eL = _parts
    e = e0 - rho * eL
    sig2 = float(e @ e) / n
    logdet = (_logdet or _LogDet(W))(rho)
    return -0.5 * n * (LOG_2PI + 1.0) - 0.5 * n * math.log(sig2) + logdet


def _full_loglik(theta: np.ndarray, y, Wy, X, logdet) -> float:
    k = X.shape[1]
    beta, rho, sig2 = theta[:k], theta[k], theta[k + 1]
    if sig2 <= 0:
        return -np.inf
    e = y - rho * Wy - X @ beta
    n = y.shape[0]
    return -0.5 * n * (LOG_2PI + math.log(sig2)) + logdet(rho) - float(e @ e) / (2.0 * sig2)


def numerical_hessian(f, x: np.ndarray, rel_step: float = 1e-4) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    m = x.size
    h = rel_step * np.maximum(1.0, np.abs(x))
    H = np.empty((m, m))
    f0 = f(x)
    for i in range(m):
        ei = np.zeros(m)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(m)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4.0 * h[i] * h[j])
    return H


def predict_sar(fit: SarFit, X, W: WeightsMatrix) -> np.ndarray:
    """Reduced-form mean ``(I - rho W)^-1 X beta``."""
    X = np.asarray(X, dtype=float)
    if X.shape[1] != fit.beta.size or X.shape[0] != W.n:
        raise SarError("dimension mismatch between fit, X and W")
    A = np.eye(W.n) - fit.rho * W.to_dense()
    try:
        out = np.linalg.solve(A, X @ fit.beta)
    except np.linalg.LinAlgError as exc:
        raise SarError("I - rho W is singular") from exc
    if not np.all(np.isfinite(out)):
        raise SarError("I - rho W is numerically singular")
    return out


def fit_sar(data: ModelMatrix, W: WeightsMatrix) -> SarFit:
    if W.n != data.n:
        raise SarError(f"weights size {W.n} does not match n={data.n}")
    if np.ptp(data.y) == 0:
        raise SarError("outcome is constant")
    X, y = data.X, data.y
    _check_design(X)
    n, k = X.shape
    Wy = W.sparse @ y
    b0 = _ols(X, y)
    bL = _ols(X, Wy)
    parts = (y - X @ b0, Wy - X @ bL)
    logdet = _LogDet(W)
    lo, hi = rho_bounds(W)

    if W.sparse.nnz == 0:
        # no spatial structure: likelihood is flat in rho
        rho = 0.0
    else:
        rho = golden_section_max(
            lambda r: concentrated_loglik(r, data, W, logdet, parts), lo + BOUND_EPS, hi - BOUND_EPS
        )
    beta = b0 - rho * bL
    e = parts[0] - rho * parts[1]
    sig2 = float(e @ e) / n
    loglik = concentrated_loglik(rho, data, W, logdet, parts)

    theta = np.r_[beta, rho, sig2]
    H = numerical_hessian(lambda th: _full_loglik(th, y, Wy, X, logdet), theta)
    se = np.full(k + 1, np.nan)
    if W.sparse.nnz == 0:
        keep = np.r_[np.arange(k), k + 1]
        cov = np.linalg.inv(-H[np.ix_(keep, keep)])
        se[:k] = np.sqrt(np.diag(cov)[:k])
    else:
        cov = np.linalg.inv(-H)
        se[:] = np.sqrt(np.diag(cov)[: k + 1])
    coefs = np.r_[beta, rho]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = coefs / se
    p = 2.0 * stats.norm.sf(np.abs(z))

    fit = SarFit(
        rho=float(rho),
        beta=beta,
        sigma2=sig2,
        se=se,
        z=z,
        p_values=p,
        pseudo_r2=float("nan"),
        log_likelihood=float(loglik),
        n=n,
        names=data.names,
        bounds=(lo, hi),
    )
    yhat = predict_sar(fit, X, W)
    r = np.corrcoef(y, yhat)[0, 1] if np.ptp(yhat) > 0 else 0.0
    object.__setattr__(fit, "pseudo_r2", float(r * r))
    return fit
