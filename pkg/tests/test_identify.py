import numpy as np
import pytest

from hawkesid.errors import NotIdentifiableError, RankDeficiencyError, ValidationError
from hawkesid.identify import (
    EnvironmentSet,
    Intervention,
    KernelDag,
    align,
    assemble_polysystem,
    block_zero_mask,
    embed_kernel_dag,
    embedded_snapshot,
    fit_exponential,
    generic_support,
    numerical_rank,
    recover_baseline,
    solve_kernels,
    stacked_system,
    variety_dimension,
)
from hawkesid.model import HawkesModel
from hawkesid.simulate import simulate_inar


def bipartite_envs(phi, f, count=2):
    k = embedded_snapshot(f, phi)
    n, p = f.shape
    return EnvironmentSet((k,) * count, mixing_zeros=block_zero_mask(n, p))


def chain_envs(m0, f, interventions):
    snaps = []
    for iv in interventions:
        m = m0.copy()
        if iv is not None:
            for (i, c), v in zip(iv.entries, iv.values):
                m[i, c] = v
        snaps.append(f @ np.linalg.inv(np.eye(m.shape[0]) - m))
    return EnvironmentSet(tuple(snaps), tuple(interventions))


def generic_bipartite(p):
    return embed_kernel_dag(np.ones((p, p)))


CHAIN = np.array([[0.0, -0.4, 0.0], [0.0, 0.0, 0.6], [0.0, 0.0, 0.0]])
CHAIN_IVS = [
    None,
    Intervention(((1, 2),), "hard"),
    Intervention(((0, 1),), "hard"),
    Intervention(((1, 2),), "hard", (0.9,)),
]


def test_embed_zero_snapshot():
    d = embed_kernel_dag(np.zeros((3, 3)))
    assert not d.matrix.any()
    assert all(not ch for ch in d.child_sets)


def test_embed_pattern_reading():
    d = embed_kernel_dag([[0.3, 0.0], [0.1, 0.2]])
    assert d.source_children() == (frozenset({0, 1}), frozenset({1}))
    assert d.bipartite and d.is_acyclic
    np.testing.assert_allclose(d.phi, [[0.3, 0.0], [0.1, 0.2]])


@pytest.mark.parametrize("seed", range(5))
def test_embedding_is_nilpotent(seed):
    phi = np.random.default_rng(seed).uniform(-1, 1, (4, 4))
    m = embed_kernel_dag(phi).matrix
    eye = np.eye(8)
    np.testing.assert_array_equal(m @ m, np.zeros((8, 8)))
    np.testing.assert_allclose(np.linalg.inv(eye - m), eye + m, atol=1e-12)


def test_embed_rejects_non_square():
    with pytest.raises(ValidationError):
        embed_kernel_dag(np.zeros((2, 3)))
    with pytest.raises(ValidationError):
        KernelDag.from_matrix(np.array([[0.0, 0.0], [1.0, 0.0]]))


def test_bipartite_has_no_multi_hop_descendants():
    rng = np.random.default_rng(0)
    phi = rng.uniform(0.05, 0.3, (3, 3))
    d = embed_kernel_dag(phi)
    systems = assemble_polysystem(bipartite_envs(phi, rng.standard_normal((5, 3))), d)
    assert all(s.multi_hop == () for s in systems)
    assert all(not d.multi_hop(c) for c in range(d.q))


@pytest.mark.parametrize("count", [2, 3, 5])
def test_bipartite_variety_dim_zero_and_exact_solution(count):
    rng = np.random.default_rng(count)
    phi = rng.uniform(0.0, 0.3, (3, 3))
    f = rng.standard_normal((5, 3))
    envs = bipartite_envs(phi, f, count)
    rep = variety_dimension(assemble_polysystem(envs, embed_kernel_dag(phi)))
    assert rep.variety_dim == 0 and rep.identifiable
    sol = solve_kernels(envs, rep)
    np.testing.assert_allclose(sol.phi, phi, atol=1e-10)
    np.testing.assert_allclose(sol.mixing[:5, :3], f, atol=1e-10)


def test_differenced_assembly_needs_two_environments():
    phi = np.full((2, 2), 0.1)
    with pytest.raises(ValidationError):
        assemble_polysystem(bipartite_envs(phi, np.eye(2), count=1), embed_kernel_dag(phi))


def test_generic_single_environment_is_not_identifiable():
    p = 3
    k = np.random.default_rng(1).standard_normal((2 * p, 2 * p))
    systems = assemble_polysystem(EnvironmentSet((k,)), generic_support(p), differenced=False)
    rep = variety_dimension(systems)
    assert rep.variety_dim >= 3 * p * p - 2 * p
    assert not rep.identifiable
    with pytest.raises(NotIdentifiableError) as info:
        solve_kernels(EnvironmentSet((k,)), rep)
    assert info.value.report is rep


def test_chain_with_hard_interventions():
    f = np.random.default_rng(2).standard_normal((4, 3))
    envs = chain_envs(CHAIN, f, CHAIN_IVS)
    dag = KernelDag.from_matrix(CHAIN)
    assert dag.multi_hop(2) == frozenset({0})
    rep = variety_dimension(assemble_polysystem(envs, dag))
    assert rep.variety_dim == 0 and rep.identifiable
    sol = solve_kernels(envs, rep)
    np.testing.assert_allclose(sol.reference, CHAIN, atol=1e-8)
    np.testing.assert_allclose(sol.mixing, f, atol=1e-8)
    a, _ = stacked_system(rep.systems)
    assert a.shape[1] - numerical_rank(a) == rep.variety_dim


def test_variety_dim_is_monotone_in_environments():
    rng = np.random.default_rng(3)
    p = 2
    phi = rng.uniform(0.05, 0.3, (p, p))
    f = rng.standard_normal((3, p))
    entries = [(0, p), (1, p), (0, p + 1), (1, p + 1)]
    m0 = np.zeros((2 * p, 2 * p))
    m0[:p, p:] = phi
    ivs = [None] + [Intervention((e,), "hard") for e in entries]
    big = np.zeros((6, 4))
    big[:3, :2] = f
    big[3:, 2:] = f
    envs = chain_envs(m0, big, ivs)
    dims = [
        variety_dimension(assemble_polysystem(envs.subset(k), generic_support(p))).variety_dim
        for k in range(2, len(envs) + 1)
    ]
    assert all(a >= b for a, b in zip(dims, dims[1:]))
    assert dims[-1] < dims[0]


def test_solve_zero_and_exponential_snapshots():
    rng = np.random.default_rng(4)
    f = rng.standard_normal((5, 3))
    zero = np.zeros((3, 3))
    envs = bipartite_envs(zero, f)
    sol = solve_kernels(envs, variety_dimension(assemble_polysystem(envs, generic_bipartite(3))))
    assert np.linalg.norm(sol.phi) <= 1e-6

    alpha = rng.uniform(0.1, 0.4, (3, 3))
    beta = rng.uniform(0.5, 2.0, (3, 3))
    phi = alpha * np.exp(-beta * 0.5)
    envs = bipartite_envs(phi, f)
    sol = solve_kernels(envs, variety_dimension(assemble_polysystem(envs, generic_bipartite(3))))
    assert np.abs(sol.phi - phi).max() <= 1e-8


def test_solve_with_five_percent_noise():
    hits = 0
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        phi = rng.uniform(0.0, 0.3, (3, 3))
        f = rng.standard_normal((5, 3))
        k = embedded_snapshot(f, phi)
        noisy = tuple(k * (1 + 0.05 * rng.standard_normal(k.shape)) for _ in range(3))
        envs = EnvironmentSet(noisy, mixing_zeros=block_zero_mask(5, 3))
        sol = solve_kernels(envs, variety_dimension(assemble_polysystem(envs, generic_bipartite(3))))
        hits += np.abs(sol.phi - phi).max() <= 0.05
    assert hits >= 9


def test_recover_baseline_poisson():
    b = simulate_inar(HawkesModel.zero([0.2, 0.3]), 0.1, 100_000.0, seed=0)
    est = recover_baseline(b.counts.mean(axis=0), np.eye(2), np.eye(2), 0.1)
    np.testing.assert_allclose(est.baseline, [0.2, 0.3], rtol=0.03)
    assert est.clipped == 0.0


def test_recover_baseline_zero_and_scaling():
    k = np.array([[1.0, 0.2], [0.3, 1.0], [0.5, 0.5]])
    h0 = np.array([[1.2, 0.1], [0.0, 1.1]])
    u = np.array([0.4, 0.7])
    mean = k @ h0 @ u * 0.1
    np.testing.assert_allclose(recover_baseline(mean, k, h0, 0.1).baseline, u, atol=1e-12)
    np.testing.assert_array_equal(recover_baseline(np.zeros(3), k, h0, 0.1).baseline, [0.0, 0.0])
    scaled = k.copy()
    scaled[:, 1] *= 2.0
    # the coordinate of a scaled column absorbs the inverse scale
    plain = recover_baseline(k @ u * 0.1, scaled, None, 0.1).baseline
    np.testing.assert_allclose(plain, [u[0], u[1] / 2.0], atol=1e-12)
    with pytest.raises(RankDeficiencyError):
        recover_baseline(np.zeros(3), np.ones((3, 2)), None, 0.1)


def test_align_examples():
    rng = np.random.default_rng(0)
    truth = rng.standard_normal((8, 3))
    a = align(truth, truth)
    np.testing.assert_array_equal(a.permutation, [0, 1, 2])
    np.testing.assert_allclose(a.scales, 1.0)
    assert a.similarity == pytest.approx(1.0)

    rec = truth[:, [1, 0, 2]] * np.array([-2.0, -2.0, 1.0])
    a = align(rec, truth)
    np.testing.assert_array_equal(a.permutation, [1, 0, 2])
    np.testing.assert_allclose(a.scales, [-2.0, -2.0, 1.0])
    assert a.similarity == pytest.approx(1.0)
    np.testing.assert_allclose(a.apply_columns(rec), truth)


def test_align_kernel_transform():
    rng = np.random.default_rng(1)
    phi = rng.uniform(0, 0.3, (3, 3))
    perm = np.array([2, 0, 1])
    s = np.array([2.0, -1.0, 0.5])
    # recovered latent j' = perm^-1; column perm[j] carries s_j * truth_j
    z = rng.standard_normal((50, 3))
    rec = np.empty_like(z)
    rec[:, perm] = z * s
    phi_hat = np.empty_like(phi)
    phi_hat[np.ix_(perm, perm)] = phi * s[:, None] / s[None, :]
    a = align(rec, z)
    np.testing.assert_allclose(a.apply_kernel(phi_hat), phi, atol=1e-12)


def test_align_null_similarity():
    rng = np.random.default_rng(0)
    low = sum(align(*rng.standard_normal((2, 8, 3))).similarity <= 0.8 for _ in range(200))
    assert low >= 190


def test_fit_exponential_recovers_planted_parameters():
    delta = 0.1
    omegas = np.linspace(0, np.pi, 9)
    alpha = np.array([[0.3, 0.0], [0.2, 0.5]])
    beta = np.array([[1.0, 1.0], [2.0, 0.7]])
    q = np.exp(-beta[None] * delta) * np.exp(-1j * omegas)[:, None, None]
    snaps = alpha[None] * delta * q / (1 - q)
    a_hat, b_hat = fit_exponential(snaps, omegas, delta)
    np.testing.assert_allclose(a_hat, alpha, atol=1e-6)
    nz = alpha > 0
    np.testing.assert_allclose(b_hat[nz], beta[nz], rtol=1e-5)
