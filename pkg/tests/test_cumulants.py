import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hawkesid.cumulants import (
    CPFactors,
    canonicalize,
    cp_decompose,
    cumulant_standard_errors,
    estimate_cumulant,
    fit_whitener,
    kruskal_check,
    kruskal_rank,
    multilinear,
    nonzero_cumulant_scan,
    preprocess,
    symmetrize,
    whitened_cp,
)
from hawkesid.errors import DecompositionError, RankDeficiencyError, ValidationError
from hawkesid.model import HawkesModel
from hawkesid.simulate import simulate_inar


def sym_tensor(weights, vecs, d=3):
    return CPFactors(np.asarray(weights, float), np.asarray(vecs, float), 0.0, d).tensor()


def test_gaussian_third_cumulant_vanishes():
    x = np.random.default_rng(0).standard_normal((20_000, 3))
    k3 = estimate_cumulant(x, 3).data
    se = cumulant_standard_errors(x, 3)
    assert np.all(np.abs(k3) <= 4 * se)


def test_poisson_cumulants_equal_rate():
    x = np.random.default_rng(1).poisson(2.0, 50_000).astype(float)
    for d in (2, 3):
        k = estimate_cumulant(x, d).data.item()
        se = cumulant_standard_errors(x, d).item()
        assert abs(k - 2.0) <= 4 * se, (d, k, se)


def test_collinear_coordinates_give_rank_one_covariance():
    x = np.random.default_rng(2).standard_normal(1000)
    c = estimate_cumulant(np.column_stack([x, 2 * x]), 2).data
    v = c[0, 0]
    np.testing.assert_allclose(c, [[v, 2 * v], [2 * v, 4 * v]], rtol=1e-12)
    np.testing.assert_allclose(c, np.cov(np.column_stack([x, 2 * x]), rowvar=False), rtol=1e-12)
    assert np.linalg.matrix_rank(c, tol=1e-10 * v) == 1


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 4), st.integers(0, 2**31))
def test_cumulants_are_multilinear(order, seed):
    rng = np.random.default_rng(seed)
    x = rng.exponential(1.0, (400, 3))
    a = rng.standard_normal((2, 3))
    lhs = estimate_cumulant(x @ a.T, order).data
    rhs = multilinear(estimate_cumulant(x, order).data, a)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9 * max(1.0, np.abs(rhs).max()))


def test_cumulant_input_validation():
    x = np.random.default_rng(0).standard_normal((500, 2))
    with pytest.raises(ValidationError):
        estimate_cumulant(x, 5)
    with pytest.raises(ValidationError):
        estimate_cumulant(x[:20], 3)
    with pytest.raises(ValidationError):
        estimate_cumulant(x, 3, lags=(1,))
    assert estimate_cumulant(x, 3, lags=(0, 2)).lags == (0, 2)


def test_preprocess_modes():
    x = np.arange(10.0)[:, None] ** 2
    np.testing.assert_array_equal(preprocess(x), np.diff(x, axis=0))
    assert abs(preprocess(x, "center").mean()) < 1e-12
    with pytest.raises(ValidationError):
        preprocess(x, "log")


def test_cp_rank_one():
    v = np.array([1.0, 2.0, 2.0]) / 3
    cp = cp_decompose(sym_tensor([1.0], v[:, None]), 1)
    assert cp.weights[0] == pytest.approx(1.0, abs=1e-10)
    assert abs(cp.factors[:, 0] @ v) == pytest.approx(1.0, abs=1e-10)


def test_cp_two_components():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((5, 2))
    a /= np.linalg.norm(a, axis=0)
    cp = cp_decompose(sym_tensor([2.0, 1.0], a), 2)
    cos = cp.factors.T @ a
    assert abs(cos[0, 0]) >= 0.999 and abs(cos[1, 1]) >= 0.999
    # odd order: (w, a) and (-w, -a) give the same tensor
    signed = cp.weights * np.sign(np.diag(cos)) ** 3
    np.testing.assert_allclose(signed, [2.0, 1.0], atol=1e-6)


def test_cp_zero_tensor_returns_zero_weight():
    cp = cp_decompose(np.zeros((3, 3, 3)), 1)
    assert cp.weights.tolist() == [0.0]


def test_cp_rejects_infeasible_rank_and_bad_fit():
    with pytest.raises(ValidationError):
        cp_decompose(np.zeros((2, 2, 2)), 3)
    t = np.random.default_rng(0).standard_normal((4, 4, 4))
    with pytest.raises(DecompositionError) as info:
        cp_decompose(symmetrize(t), 1, restarts=2)
    assert info.value.residual > 0.1


def test_canonicalize_is_idempotent():
    rng = np.random.default_rng(3)
    cp = CPFactors(rng.standard_normal(3), rng.standard_normal((4, 3)), 0.0, 3)
    once = canonicalize(cp)
    twice = canonicalize(once)
    np.testing.assert_allclose(once.tensor(), cp.tensor(), atol=1e-12)
    np.testing.assert_allclose(twice.weights, once.weights, rtol=1e-14)
    np.testing.assert_allclose(twice.factors, once.factors, rtol=0, atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(once.factors, axis=0), 1.0)


def test_kruskal_examples():
    res = kruskal_check(np.eye(3), 3)
    assert res.krank == 3 and res.bound == 3 and res.passed
    dup = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0], [2.0, 2.0, 0.0]])
    assert kruskal_rank(dup)[0] == 1
    assert not kruskal_check(dup, 3).passed
    assert not kruskal_check(dup[:, :2], 3).passed
    g = np.random.default_rng(0).standard_normal((5, 4))
    assert kruskal_check(g, 3).krank == 4 and kruskal_check(g, 3).passed


def test_kruskal_rejects_wide_matrices():
    with pytest.raises(ValidationError):
        kruskal_check(np.random.default_rng(0).standard_normal((5, 21)), 3)


def test_scan_examples():
    rng = np.random.default_rng(0)
    assert nonzero_cumulant_scan(rng.standard_normal((20_000, 2)), 4) == {2}
    assert nonzero_cumulant_scan(np.ones((2000, 2)), 4) == set()
    counts = simulate_inar(HawkesModel.exponential([0.4], [[0.3]], [[1.0]]), 0.5, 5000.0, seed=0)
    assert counts.n_bins == 10_000
    assert 3 in nonzero_cumulant_scan(counts, 3)


def test_whitener_and_whitened_cp():
    rng = np.random.default_rng(5)
    s = rng.exponential(1.0, (40_000, 3)) - 1.0
    f = np.array([[1.0, 0.99, 0.0], [0.0, 0.1, 1.0], [1.0, 1.0, 1.0], [0.5, 0.4, -1.0]])
    x = s @ f.T
    wh = fit_whitener(x)
    assert wh.matrix.shape == (3, 4)
    np.testing.assert_allclose(np.cov(wh.apply(x), rowvar=False), np.eye(3), atol=1e-8)
    cp, _ = whitened_cp(x, 3, 3, max_residual=0.5)
    fn = f / np.linalg.norm(f, axis=0)
    cos = np.abs(cp.factors.T @ fn)
    assert all(cos[i, j] > 0.98 for i, j in zip(*np.nonzero(cos == cos.max(axis=0))))
    assert sorted(np.argmax(cos, axis=0)) == [0, 1, 2]
    with pytest.raises(RankDeficiencyError):
        fit_whitener(x, rank=4)


def test_symmetrize_averages_permutations():
    t = np.random.default_rng(0).standard_normal((3, 3, 3))
    s = symmetrize(t)
    for perm in itertools.permutations(range(3)):
        np.testing.assert_allclose(s, np.transpose(s, perm), atol=1e-15)
    np.testing.assert_allclose(s.sum(), t.sum())
    assert math.isclose(np.linalg.norm(symmetrize(s)), np.linalg.norm(s))
