from dataclasses import replace

import numpy as np
import pytest
from scipy import sparse

from looplens.sarmodel import (
    ModelMatrix,
    SarError,
    concentrated_loglik,
    fit_sar,
    golden_section_max,
    numerical_hessian,
    predict_sar,
    rho_bounds,
)
from looplens.spatialstats import WeightsMatrix, row_standardize
from looplens.synthlab import gen_sar_data

from conftest import lattice_rook

BETA = (1.0, 2.0, -1.0)


@pytest.fixture(scope="module")
def W():
    return row_standardize(WeightsMatrix(sparse.csr_matrix(lattice_rook(10))))


def ols(X, y):
    return np.linalg.lstsq(X, y, rcond=None)[0]


def test_rho_zero_reduces_towards_ols(W):
    s = gen_sar_data(100, W, 0.0, BETA, 0.5, seed=1)
    fit = fit_sar(s.data, W)
    assert abs(fit.rho) < 0.1
    b = ols(s.data.X, s.data.y)
    assert np.all(np.abs(fit.beta - b) < 3 * fit.se[:-1])


def test_empty_weights_give_ols_exactly(W):
    s = gen_sar_data(100, W, 0.3, BETA, 0.5, seed=2)
    empty = WeightsMatrix(sparse.csr_matrix((100, 100)))
    fit = fit_sar(s.data, empty)
    assert fit.rho == 0.0 and np.isnan(fit.se[-1])
    assert np.allclose(fit.beta, ols(s.data.X, s.data.y), atol=1e-8, rtol=0)


def test_likelihood_maximal_on_grid(W):
    s = gen_sar_data(100, W, 0.4, BETA, 0.5, seed=3)
    fit = fit_sar(s.data, W)
    lo, hi = fit.bounds
    best = concentrated_loglik(fit.rho, s.data, W)
    for r in np.linspace(lo + 1e-6, hi - 1e-6, 101):
        assert best >= concentrated_loglik(r, s.data, W) - 1e-9
    assert lo < fit.rho < hi


def test_upper_bound_is_one_for_row_standardized(W):
    lo, hi = rho_bounds(W)
    assert hi == pytest.approx(1.0, abs=1e-10) and lo < -0.5


def test_fit_invariants(W):
    s = gen_sar_data(100, W, 0.5, BETA, 0.5, seed=4)
    fit = fit_sar(s.data, W)
    coefs = np.r_[fit.beta, fit.rho]
    assert np.allclose(fit.z, coefs / fit.se)
    assert 0 <= fit.pseudo_r2 <= 1
    yhat = predict_sar(fit, s.data.X, W)
    assert np.corrcoef(s.data.y, yhat)[0, 1] ** 2 == pytest.approx(fit.pseudo_r2, abs=1e-10)
    rows = fit.coef_table()
    assert [r[0] for r in rows] == ["Constant", "x1", "x2", "SpatialLag"]


def test_predict_at_zero_rho_is_linear(W):
    s = gen_sar_data(100, W, 0.2, BETA, 0.5, seed=5)
    fit = fit_sar(s.data, W)
    zero = replace(fit, rho=0.0)
    assert np.allclose(predict_sar(zero, s.data.X, W), s.data.X @ fit.beta, atol=1e-12)


def test_order_invariance(W):
    s = gen_sar_data(100, W, 0.4, BETA, 0.5, seed=6)
    fit = fit_sar(s.data, W)
    order = np.random.default_rng(0).permutation(100)
    data = ModelMatrix(s.data.y[order], s.data.X[order], s.data.names)
    refit = fit_sar(data, W.permuted(order))
    assert refit.rho == pytest.approx(fit.rho, abs=1e-8)
    assert np.allclose(refit.beta, fit.beta, atol=1e-8)


def test_collinear_design(W):
    rng = np.random.default_rng(0)
    x = rng.normal(size=100)
    with pytest.raises(SarError, match="collinear"):
        fit_sar(ModelMatrix.with_intercept(rng.normal(size=100), np.column_stack([x, 2 * x]), ["a", "b"]), W)


def test_model_matrix_validation():
    with pytest.raises(SarError):
        ModelMatrix(np.zeros(3), np.ones((3, 2)), ("a", "b"))
    with pytest.raises(SarError):
        ModelMatrix(np.array([1.0, np.nan, 2, 3]), np.ones((4, 1)), ("a",))


def test_golden_section():
    assert golden_section_max(lambda x: -(x - 0.3) ** 2, -1, 1) == pytest.approx(0.3, abs=1e-8)
    with pytest.raises(SarError):
        golden_section_max(lambda x: x, 1.0, 1.0)


def test_hessian_of_quadratic():
    A = np.array([[-2.0, 0.5], [0.5, -1.0]])
    H = numerical_hessian(lambda v: 0.5 * v @ A @ v, np.array([0.3, -0.2]))
    assert np.allclose(H, A, atol=1e-6)
