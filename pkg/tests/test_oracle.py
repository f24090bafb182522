import numpy as np
import pytest

from imcmc import annealing as ann
from imcmc import fk, oracle
from imcmc.measures import (
    FiniteSpace,
    IntegralOperator,
    TestFunction,
    act_measure,
    operator_norm,
    tv_norm,
)
from helpers import random_probability, two_state_chain


def toy_spec(p=0.25, betas=(0.5, 1.0, 1.5, 2.0), k_max=2, kernel_type="mh"):
    return oracle.build_clt_spec(fk.toy_model(p, betas, kernel_type=kernel_type), k_max)


def annealing_spec(eps=0.3, k_max=2):
    sp = FiniteSpace("S", 4)
    m = ann.make_metropolis_model(sp, np.array([0.0, 1.0, 2.0, 3.0]), (0.3, 0.6, 0.9, 1.2), eps)
    return oracle.build_clt_spec(m, k_max)


# ---------------------------------------------------------------------------
# invariant measures
# ---------------------------------------------------------------------------

def test_invariant_measure_two_state():
    _, M, pi = two_state_chain()
    got = oracle.invariant_measure(M)
    assert np.allclose(got.weights, pi.weights, atol=1e-13)


def test_invariant_measure_rank_one():
    sp = FiniteSpace("s", 5)
    rng = np.random.default_rng(1)
    mu = random_probability(rng, sp)
    got = oracle.invariant_measure(IntegralOperator.rank_one(sp, mu))
    assert np.allclose(got.weights, mu.weights, atol=1e-14)


def test_invariant_measure_cross_module():
    m = fk.toy_model(0.3, (0.5, 1.0, 1.5))
    rng = np.random.default_rng(2)
    mu = random_probability(rng, fk.path_space(m, 1).space)
    kern = fk.mh_kernel(m, 2, mu)
    got = oracle.invariant_measure(kern)
    assert tv_norm(got - fk.fk_map(m, 1, mu)) < 1e-11


def test_contraction_index():
    _, M, _ = two_state_chain()
    n0, m_n0, p_n0 = oracle.contraction_index(M)
    assert n0 == 1 and m_n0 == pytest.approx(0.7) and p_n0 == pytest.approx(2 / 0.3)
    spec = annealing_spec(eps=0.3)
    n0, m_n0, _ = oracle.contraction_index(spec.kernels[1])
    assert n0 == 1 and m_n0 <= 0.3 + 1e-12
    # a pure permutation never contracts
    sp = FiniteSpace("perm", 3)
    perm = IntegralOperator(sp, sp, np.roll(np.eye(3), 1, axis=1), markov=True)
    with pytest.raises(oracle.OracleError):
        oracle.contraction_index(perm)


# ---------------------------------------------------------------------------
# resolvents and the Poisson equation
# ---------------------------------------------------------------------------

def test_resolvent_rank_one():
    sp = FiniteSpace("s", 4)
    rng = np.random.default_rng(3)
    mu = random_probability(rng, sp)
    M = IntegralOperator.rank_one(sp, mu)
    P = oracle.resolvent(M, mu)
    expect = np.eye(4) - np.outer(np.ones(4), mu.weights)
    assert np.allclose(P.matrix, expect, atol=1e-14)
    assert oracle.poisson_residual(M, mu, P) < 1e-14


def test_resolvent_two_state_eigenvalue():
    space, M, pi = two_state_chain()
    P = oracle.resolvent(M, pi)
    # centered functions are eigenfunctions with eigenvalue 0.7, so P = 1/0.3 on them
    f = np.array([1.0, 0.0])
    fb = f - pi.weights @ f
    assert np.allclose(P.matrix @ fb, fb / 0.3, atol=1e-12)
    assert np.abs(P.matrix @ np.ones(2)).max() < 1e-12


def test_poisson_residual_detects_corruption():
    space, M, pi = two_state_chain()
    P = oracle.resolvent(M, pi)
    bad = P.matrix.copy()
    bad[0, 0] += 1e-3
    resid = oracle.poisson_residual(M, pi, IntegralOperator(space, space, bad))
    assert resid >= 1e-4


def test_resolvent_bundle_certificates():
    spec = toy_spec(k_max=3)
    for b in spec.bundles:
        assert b.poisson_resid <= 1e-10
        assert oracle.poisson_residual(b) == b.poisson_resid
        assert b.series_resid <= 1e-8
        assert operator_norm(b.resolvent) <= b.p_n0 + 1e-9
        drift = np.abs(b.invariant.weights @ b.kernel.matrix - b.invariant.weights).max()
        assert drift <= 1e-12


# ---------------------------------------------------------------------------
# local variance and covariance
# ---------------------------------------------------------------------------

def test_local_variance_two_state():
    space, M, pi = two_state_chain()
    bundle = oracle.resolvent_bundle(M, pi)
    f = TestFunction(space, [1.0, 0.0])
    assert oracle.local_variance(bundle, f) == pytest.approx(34.0 / 27.0, abs=1e-12)
    assert oracle.local_variance(bundle, TestFunction.constant(space, 3.0)) == pytest.approx(0.0, abs=1e-13)


def test_local_variance_rank_one_is_static_variance():
    sp = FiniteSpace("s", 4)
    rng = np.random.default_rng(4)
    mu = random_probability(rng, sp)
    bundle = oracle.resolvent_bundle(IntegralOperator.rank_one(sp, mu), mu)
    f = TestFunction(sp, rng.standard_normal(4))
    fb = f.values - mu.weights @ f.values
    assert oracle.local_variance(bundle, f) == pytest.approx(float(mu.weights @ fb**2), abs=1e-13)


def test_local_covariance_properties():
    space, M, pi = two_state_chain()
    bundle = oracle.resolvent_bundle(M, pi)
    rng = np.random.default_rng(5)
    f = TestFunction(space, rng.standard_normal(2))
    g = TestFunction(space, rng.standard_normal(2))
    h = TestFunction(space, rng.standard_normal(2))
    # diagonal agrees with the variance
    assert oracle.local_covariance(bundle, f, f) == pytest.approx(
        oracle.local_variance(bundle, f), abs=1e-10
    )
    # kills constants
    assert oracle.local_covariance(bundle, f, TestFunction.constant(space, 2.0)) == pytest.approx(0.0, abs=1e-13)
    # bilinear
    a = 1.7
    lhs = oracle.local_covariance(bundle, f, TestFunction(space, a * g.values + h.values))
    rhs = a * oracle.local_covariance(bundle, f, g) + oracle.local_covariance(bundle, f, h)
    assert lhs == pytest.approx(rhs, abs=1e-12)


# ---------------------------------------------------------------------------
# semigroups and asymptotic variance
# ---------------------------------------------------------------------------

def test_d_semigroup_conventions():
    spec = toy_spec(k_max=3)
    ident = oracle.d_semigroup(spec, 3, 2)
    assert np.array_equal(ident.matrix, np.eye(spec.spaces[2].size))
    single = oracle.d_semigroup(spec, 2, 2)
    assert np.allclose(single.matrix, spec.d_ops[1].matrix)
    left = oracle.d_semigroup(spec, 1, 3)
    right = spec.d_ops[0].matrix @ (spec.d_ops[1].matrix @ spec.d_ops[2].matrix)
    assert np.abs(left.matrix - right).max() < 1e-12


def test_coefficient_table():
    assert [oracle.coefficient_sq(l) for l in range(4)] == [1.0, 2.0, 6.0, 20.0]
    assert oracle.coefficient(0) == 1.0


def test_cross_coefficient_table():
    # diagonal reduces to the variance coefficients
    for l in range(4):
        assert oracle.cross_coefficient(l, l) == oracle.coefficient_sq(l)
    # off-diagonal values are the weight-array overlaps, below the
    # Cauchy-Schwarz product of the variance coefficients
    assert oracle.cross_coefficient(1, 0) == 1.0
    assert oracle.cross_coefficient(2, 0) == 1.0
    assert oracle.cross_coefficient(2, 1) == 3.0
    assert oracle.cross_coefficient(3, 2) == 10.0
    for dk, dj in ((1, 0), (2, 1), (3, 1)):
        assert oracle.cross_coefficient(dk, dj) < oracle.coefficient(dk) * oracle.coefficient(dj)


def test_asymptotic_variance_level0_is_local():
    spec = toy_spec(k_max=2)
    f = TestFunction(spec.spaces[0], [1.0, 0.0])
    assert oracle.asymptotic_variance(spec, 0, f) == pytest.approx(
        oracle.local_variance(spec.bundles[0], f), abs=1e-14
    )


def test_asymptotic_variance_nonnegative_quadratic_form():
    spec = toy_spec(k_max=2)
    rng = np.random.default_rng(6)
    k = 2
    size = spec.spaces[k].size
    fns = [TestFunction(spec.spaces[k], rng.standard_normal(size)) for _ in range(6)]
    gram = np.empty((6, 6))
    for i, fi in enumerate(fns):
        for j, fj in enumerate(fns):
            gram[i, j] = oracle.asymptotic_cross_covariance(spec, k, k, fi, fj)
    eig = np.linalg.eigvalsh((gram + gram.T) / 2.0)
    assert eig.min() >= -1e-8


def test_cross_covariance_consistency():
    spec = toy_spec(k_max=2)
    rng = np.random.default_rng(7)
    for k in range(3):
        f = TestFunction(spec.spaces[k], rng.standard_normal(spec.spaces[k].size))
        assert oracle.asymptotic_cross_covariance(spec, k, k, f, f) == pytest.approx(
            oracle.asymptotic_variance(spec, k, f), abs=1e-12
        )
    f0 = TestFunction(spec.spaces[0], rng.standard_normal(2))
    const = TestFunction.constant(spec.spaces[1], 5.0)
    assert oracle.asymptotic_cross_covariance(spec, 1, 0, const, f0) == pytest.approx(0.0, abs=1e-12)


def test_rank_one_spec_reduces_to_static_variances():
    spec = toy_spec(k_max=2, kernel_type="rank_one")
    for k in range(3):
        f = TestFunction(spec.spaces[k], (np.arange(spec.spaces[k].size) % 2 == 0).astype(float))
        pi = spec.pis[k].weights
        fb = f.values - pi @ f.values
        assert oracle.local_variance(spec.bundles[k], f) == pytest.approx(
            float(pi @ fb**2), abs=1e-13
        )


# ---------------------------------------------------------------------------
# two-state closed forms
# ---------------------------------------------------------------------------

def test_toy_closed_form_symmetric():
    report = oracle.toy_closed_form(0.5, (0.5, 1.0, 2.0))
    for marg in report.marginals:
        assert np.allclose(marg, [0.5, 0.5], atol=1e-15)
    for pm in report.path_measures:
        assert np.allclose(pm, np.full(pm.size, 1.0 / pm.size), atol=1e-14)


def test_toy_closed_form_values():
    report = oracle.toy_closed_form(0.2, (1.0, 2.0))
    assert report.marginals[0][0] == pytest.approx(0.2)
    assert report.marginals[1][0] == pytest.approx(0.04 / 0.68)


def test_toy_closed_form_matches_general_machinery():
    rng = np.random.default_rng(8)
    for _ in range(5):
        p = float(rng.uniform(0.1, 0.9))
        betas = np.cumsum(rng.uniform(0.2, 0.8, size=3))
        report = oracle.toy_closed_form(p, betas)
        model = fk.toy_model(p, betas)
        for l in range(len(betas)):
            pi = fk.exact_path_measure(model, l)
            assert np.abs(pi.weights - report.path_measures[l]).max() < 1e-12
            term = np.arange(pi.space.size) % 2
            assert pi.weights[term == 0].sum() == pytest.approx(report.marginals[l][0], abs=1e-12)
        for l in range(len(betas) - 1):
            D = fk.first_order_D(model, l, fk.exact_path_measure(model, l))
            assert np.abs(D.matrix - report.d_ops[l]).max() < 1e-12
            S = fk.transport_kernel(
                fk.exact_path_measure(model, l), fk.path_potential(model, l)
            )
            assert np.abs(S.matrix - report.transports[l]).max() < 1e-12


# ---------------------------------------------------------------------------
# stacked product model
# ---------------------------------------------------------------------------

def test_product_model_base_case():
    spec = toy_spec(k_max=1)
    pm = oracle.product_model(spec, 0)
    # with nothing below, the joint first-order operator is the level-0
    # limit measure on the first output coordinate times D_1
    expect = np.einsum("a,rb->rab", spec.pis[0].weights, spec.d_ops[0].matrix)
    assert np.allclose(pm.d_op.matrix, expect.reshape(pm.d_op.matrix.shape), atol=1e-14)


def test_product_limit_invariant():
    for spec in (toy_spec(k_max=3), annealing_spec(k_max=3)):
        pm = oracle.product_model(spec, 2)
        out = act_measure(pm.limit, pm.kernel)
        assert tv_norm(out - pm.limit) < 1e-10


def test_product_remainder_quadratic():
    for spec in (toy_spec(k_max=3), annealing_spec(k_max=3)):
        pm = oracle.product_model(spec, 2)
        rng = np.random.default_rng(9)
        hits, trials = 0, 20
        for _ in range(trials):
            mu = random_probability(rng, pm.space)
            ratios = oracle.remainder_ratios(
                lambda v: oracle.product_map(spec, 2, v), pm.limit, mu, pm.d_op
            )
            if all(3.5 <= r <= 4.5 for r in ratios):
                hits += 1
        assert hits >= 0.9 * trials


def test_product_model_needs_headroom():
    spec = toy_spec(k_max=2)
    with pytest.raises(ValueError):
        oracle.product_model(spec, 2)
