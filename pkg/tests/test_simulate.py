import math

import numpy as np
import pytest

from hawkesid.errors import CapViolationError, UnstableModelError, ValidationError
from hawkesid.evaluate import mcc
from hawkesid.model import HawkesModel, check_stability
from hawkesid.simulate import (
    BinnedCounts,
    EventSequence,
    GaussianRounded,
    MixingMap,
    MixtureNoise,
    Softplus,
    bin_events,
    make_generic_linear,
    make_mlp_mixing,
    mix,
    simulate,
    simulate_inar,
    simulate_nonlinear,
)

EXP1 = HawkesModel.exponential([0.2], [[0.3]], [[1.0]])


def test_bin_example():
    e = EventSequence(0.4, (np.array([0.05, 0.12, 0.31]),))
    np.testing.assert_array_equal(bin_events(e, 0.1).counts[:, 0], [1, 1, 0, 1])


def test_bin_empty_and_coarse():
    e = EventSequence(1.0, (np.empty(0), np.empty(0)))
    b = bin_events(e, 0.1)
    assert b.counts.shape == (10, 2) and not b.counts.any()
    e = EventSequence(1.0, (np.array([0.1, 0.5]), np.array([0.9])))
    b = bin_events(e, 2.0)
    np.testing.assert_array_equal(b.counts, [[2, 1]])


def test_bin_conserves_counts():
    e = simulate(HawkesModel.exponential([0.3, 0.2], [[0.2, 0.1], [0.1, 0.2]], 1.0), 200.0, seed=1)
    for delta in (0.05, 0.3, 7.0):
        np.testing.assert_array_equal(bin_events(e, delta).counts.sum(axis=0), e.counts())


def test_event_sequence_validation():
    with pytest.raises(ValidationError):
        EventSequence(1.0, (np.array([0.2, 0.1]),))
    with pytest.raises(ValidationError):
        EventSequence(1.0, (np.array([1.0]),))


def test_zero_kernel_count_is_poisson():
    e = simulate(HawkesModel.zero([0.2]), 10_000.0, seed=3)
    n = e.counts()[0]
    assert abs(n - 2000) <= 4 * math.sqrt(2000)


def test_exponential_rate_matches_fixed_point():
    lam = check_stability(EXP1).stationary_intensity[0]
    e = simulate(EXP1, 10_000.0, seed=11)
    assert e.counts()[0] / 10_000.0 == pytest.approx(lam, rel=0.05)


def test_simulate_is_deterministic():
    m = HawkesModel.exponential([0.3, 0.2], [[0.2, 0.1], [0.1, 0.2]], [[1.0, 2.0], [0.5, 1.0]])
    a, b = simulate(m, 300.0, seed=5), simulate(m, 300.0, seed=5)
    for x, y in zip(a.events, b.events):
        np.testing.assert_array_equal(x, y)
    c = simulate(m, 300.0, seed=6)
    assert any(x.size != y.size or not np.array_equal(x, y) for x, y in zip(a.events, c.events))


def test_simulate_rejects_unstable():
    with pytest.raises(UnstableModelError):
        simulate(HawkesModel.exponential([0.2], [[1.2]], [[1.0]]), 10.0, seed=0)


def test_softplus_rate():
    assert float(Softplus()(np.zeros(1))[0]) == pytest.approx(math.log(2))
    m = HawkesModel.zero([1.0])
    e = simulate_nonlinear(m, Softplus(), 10_000.0, seed=2, lam_max=2.0)
    assert e.counts()[0] / 10_000.0 == pytest.approx(math.log1p(math.e), rel=0.05)
    assert math.log1p(math.e) == pytest.approx(1.313262, abs=1e-6)


def test_cap_violation_names_time():
    with pytest.raises(CapViolationError, match="t="):
        simulate_nonlinear(HawkesModel.zero([1.0]), Softplus(), 100.0, seed=0, lam_max=1.0)


def test_inar_zero_kernel_mean():
    b = simulate_inar(HawkesModel.zero([0.2]), 0.1, 10_000.0, seed=4)
    mean, n = b.counts.mean(), b.n_bins
    assert abs(mean - 0.02) <= 3 * math.sqrt(0.02 / n)


def test_inar_mean_rate_approaches_fixed_point():
    lam = check_stability(EXP1).stationary_intensity[0]
    # exact stationary mean of the discretised recursion, no Monte Carlo involved
    gaps = []
    for delta in (0.5, 0.2, 0.1, 0.05):
        q = math.exp(-delta)
        gain = 0.3 * delta * q / (1 - q)
        gaps.append(abs(0.2 / (1 - gain) - lam))
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    b = simulate_inar(EXP1, 0.05, 20_000.0, seed=1)
    q = math.exp(-0.05)
    assert b.counts.mean() / 0.05 == pytest.approx(0.2 / (1 - 0.3 * 0.05 * q / (1 - q)), rel=0.05)


def test_inar_determinism_and_noise_families():
    m = HawkesModel.exponential([0.3, 0.2], [[0.2, 0.1], [0.1, 0.2]], 1.0)
    for noise in (GaussianRounded(0.5), MixtureNoise((0.5, 0.5), (-0.2, 0.2), (0.3, 0.3))):
        a = simulate_inar(m, 0.5, 500.0, noise=noise, seed=3)
        b = simulate_inar(m, 0.5, 500.0, noise=noise, seed=3)
        np.testing.assert_array_equal(a.counts, b.counts)
        assert a.counts.min() >= 0
    a = simulate_inar(m, 0.1, 500.0, seed=3)
    np.testing.assert_array_equal(a.counts, simulate_inar(m, 0.1, 500.0, seed=3).counts)


def test_inar_window_path_matches_exact_recursion_in_mean():
    exact = simulate_inar(EXP1, 0.1, 20_000.0, seed=7).counts.mean()
    windowed = simulate_inar(EXP1, 0.1, 20_000.0, seed=7, window=200).counts.mean()
    assert windowed == pytest.approx(exact, rel=0.05)


def test_mix_examples():
    b = simulate_inar(HawkesModel.exponential([0.3, 0.2, 0.4], np.full((3, 3), 0.1), 1.0), 0.1, 300.0, seed=0)
    obs = mix(b, MixingMap.linear(np.eye(3)))
    np.testing.assert_array_equal(obs.data, b.counts.astype(float))

    mlp = MixingMap("mlp", (np.eye(3),))
    np.testing.assert_array_equal(mix(b, mlp).data, b.counts.astype(float))

    f = 2.0 * np.eye(3)[[2, 0, 1]]
    obs = mix(b, MixingMap.linear(f))
    assert mcc(obs.data, b.counts).score == pytest.approx(1.0, abs=1e-12)


def test_mix_shape_mismatch():
    b = BinnedCounts(0.1, np.zeros((5, 2), dtype=int))
    with pytest.raises(ValidationError):
        mix(b, MixingMap.linear(np.eye(3)))


@pytest.mark.parametrize("n,p", [(3, 3), (5, 3), (8, 2)])
def test_generic_linear_is_full_rank_and_reproducible(n, p):
    f = make_generic_linear(n, p, seed=9).matrices[0]
    assert f.shape == (n, p)
    assert np.linalg.matrix_rank(f) == p
    np.testing.assert_array_equal(f, make_generic_linear(n, p, seed=9).matrices[0])


def test_mlp_mixing_layers_are_orthonormal():
    m = make_mlp_mixing(5, 3, seed=0, layers=2)
    assert [a.shape for a in m.matrices] == [(5, 3), (5, 5)]
    for a in m.matrices:
        np.testing.assert_allclose(a.T @ a, np.eye(a.shape[1]), atol=1e-12)
    with pytest.raises(ValidationError):
        MixingMap("mlp", (np.ones((3, 3)),))
    assert MixingMap.from_dict(m.to_dict()).to_dict() == m.to_dict()
