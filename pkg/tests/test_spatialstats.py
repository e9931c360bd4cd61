import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import sparse
from shapely.geometry import box

from looplens.spatialstats import (
    CollinearityError,
    SpatialStatsError,
    WeightsMatrix,
    build_weights,
    morans_i,
    morans_permutation_test,
    parse_weights_mode,
    row_standardize,
    vif,
)

from conftest import lattice_rook


def double_sum_moran(y, Wd):
    n = len(y)
    ybar = sum(y) / n
    num = 0.0
    s0 = 0.0
    for i in range(n):
        for j in range(n):
            num += Wd[i][j] * (y[i] - ybar) * (y[j] - ybar)
            s0 += Wd[i][j]
    den = sum((v - ybar) ** 2 for v in y)
    return n / s0 * num / den


def random_weights(rng, n, density=0.2, standardize=True):
    A = (rng.random((n, n)) < density) * rng.uniform(0.1, 2.0, (n, n))
    np.fill_diagonal(A, 0.0)
    A[0, 1] = max(A[0, 1], 0.5)
    w = WeightsMatrix(sparse.csr_matrix(A))
    return row_standardize(w) if standardize else w


def cycle4() -> WeightsMatrix:
    A = np.zeros((4, 4))
    for i in range(4):
        A[i, (i + 1) % 4] = A[(i + 1) % 4, i] = 1
    return row_standardize(WeightsMatrix(sparse.csr_matrix(A)))


def test_knn_on_a_line():
    W = build_weights("knn", coords=np.array([[0.0, 0], [1, 0], [3, 0], [6, 0]]), k=1)
    assert W.neighbors(0) == [(1, 1.0)]
    assert W.neighbors(3) == [(2, 1.0)]
    assert [j for j, _ in W.neighbors(1)] == [0, 2]
    assert np.allclose(np.asarray(W.sparse.sum(axis=1)).ravel(), 1.0, atol=1e-12)


def test_queen_2x2():
    polys = [box(c, r, c + 1, r + 1) for r in range(2) for c in range(2)]
    W = build_weights("queen", polygons=polys)
    D = W.to_dense()
    expected = (np.ones((4, 4)) - np.eye(4)) / 3
    assert np.allclose(D, expected, atol=1e-15)


def test_queen_matches_enumeration_on_3x3():
    polys = [box(c, r, c + 1, r + 1) for r in range(3) for c in range(3)]
    W = build_weights("queen", polygons=polys, standardize=False)
    for i in range(9):
        ri, ci = divmod(i, 3)
        want = [j for j in range(9) if j != i and max(abs(divmod(j, 3)[0] - ri), abs(divmod(j, 3)[1] - ci)) == 1]
        assert [j for j, _ in W.neighbors(i)] == want


def test_small_band_flags_everyone():
    W = build_weights("distance_band", coords=np.array([[0.0, 0], [10, 0], [0, 10]]), band=1.0)
    assert W.sparse.nnz == 0 and W.islands == (0, 1, 2)


def test_mode_strings():
    assert parse_weights_mode("knn:7") == ("knn", 7)
    assert parse_weights_mode("queen") == ("queen", None)
    assert parse_weights_mode("distance_band:250") == ("distance_band", 250.0)
    with pytest.raises(SpatialStatsError):
        parse_weights_mode("rook")


def test_weights_validation():
    with pytest.raises(SpatialStatsError):
        WeightsMatrix(sparse.csr_matrix(np.eye(2)))
    with pytest.raises(SpatialStatsError):
        WeightsMatrix(sparse.csr_matrix(np.array([[0.0, -1.0], [1.0, 0.0]])))


def test_row_standardize_idempotent():
    W = random_weights(np.random.default_rng(0), 30)
    again = row_standardize(W)
    assert np.array_equal(W.to_dense(), again.to_dense())


def test_triplet_export():
    text = cycle4().to_triplets_csv()
    assert text.splitlines()[0] == "i,j,w" and text.splitlines()[1] == "0,1,0.5"


def test_alternating_cycle_is_minus_one():
    assert morans_i([1, -1, 1, -1], cycle4()).I == pytest.approx(-1.0, abs=1e-12)


def test_matches_double_sum():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = 50
        W = random_weights(rng, n, standardize=bool(rng.integers(2)))
        y = rng.normal(size=n)
        assert morans_i(y, W).I == pytest.approx(double_sum_moran(y.tolist(), W.to_dense().tolist()), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100) | st.floats(-100, -0.01), st.floats(-1e3, 1e3))
def test_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    W = random_weights(rng, 20)
    y = rng.normal(size=20)
    assert morans_i(a * y + b, W).I == pytest.approx(morans_i(y, W).I, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_unit_relabelling_invariance(seed):
    rng = np.random.default_rng(seed)
    W = random_weights(rng, 25)
    y = rng.normal(size=25)
    order = rng.permutation(25)
    assert morans_i(y[order], W.permuted(order)).I == pytest.approx(morans_i(y, W).I, abs=1e-12)


def test_moran_errors():
    with pytest.raises(SpatialStatsError, match="zero variance"):
        morans_i([2.0, 2.0, 2.0, 2.0], cycle4())
    with pytest.raises(SpatialStatsError):
        morans_i([1.0, 2.0, 3.0], WeightsMatrix(sparse.csr_matrix((3, 3))))


def path_graph(n):
    A = np.zeros((n, n))
    for i in range(n - 1):
        A[i, i + 1] = A[i + 1, i] = 1
    return row_standardize(WeightsMatrix(sparse.csr_matrix(A)))


def test_block_pattern_is_significant():
    y = np.r_[np.zeros(20), np.ones(20)]
    res = morans_permutation_test(y, path_graph(40), 999, seed=3)
    assert res.p_value <= 0.05 and res.I > 0


def test_permutation_p_bounds_and_determinism():
    rng = np.random.default_rng(2)
    W = random_weights(rng, 30)
    y = rng.normal(size=30)
    a = morans_permutation_test(y, W, 99, seed=7)
    b = morans_permutation_test(y, W, 99, seed=7, threads=3)
    assert a == b
    assert 1 / 100 <= a.p_value <= 1
    with pytest.raises(SpatialStatsError):
        morans_permutation_test(y, W, 10)


def test_report_json_keys():
    res = morans_permutation_test([1, -1, 1, -1, 2.0], path_graph(5), 19, seed=1)
    assert set(res.to_json()) == {"I", "expected", "p", "n_perm", "seed"}
    assert res.expected_null == -0.25


def test_vif_orthogonal():
    # centred, mutually orthogonal columns from a Hadamard design
    H = np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]], dtype=float)
    X = np.vstack([H[:, 1:]] * 5)
    res = vif(X)
    assert np.all(np.abs(res.vif - 1.0) < 1e-9)
    assert res.mean_vif == pytest.approx(1.0)


def test_vif_against_normal_equations():
    rng = np.random.default_rng(4)
    n = 500
    x1 = rng.normal(size=n)
    x2 = x1 + 0.5 * rng.normal(size=n)
    x3 = rng.normal(size=n)
    X = np.column_stack([x1, x2, x3])
    res = vif(X, ["a", "b", "c"])
    for j in range(3):
        Z = np.column_stack([np.ones(n), np.delete(X, j, axis=1)])
        coef = np.linalg.solve(Z.T @ Z, Z.T @ X[:, j])
        resid = X[:, j] - Z @ coef
        r2 = 1 - resid @ resid / np.sum((X[:, j] - X[:, j].mean()) ** 2)
        assert res.vif[j] == pytest.approx(1 / (1 - r2), abs=1e-8)
    assert np.all(res.vif >= 1)


def test_vif_duplicate_column_named():
    rng = np.random.default_rng(0)
    x = rng.normal(size=50)
    with pytest.raises(CollinearityError) as exc:
        vif(np.column_stack([x, rng.normal(size=50), x]), ["a", "b", "c"])
    assert exc.value.column in {"a", "c"}


def test_lattice_weights_rows_sum_to_one():
    W = row_standardize(WeightsMatrix(sparse.csr_matrix(lattice_rook(5))))
    assert np.allclose(np.asarray(W.sparse.sum(axis=1)).ravel(), 1.0, atol=1e-12)
