import numpy as np
import pytest

from oracles import de_boor, riemann
from pencox.data import Episode
from pencox.quadrature import EtaEvaluator, QuadratureRule, cumulative_hazard, quadrature_nodes, weighted_moments
from pencox.splines import ConfigurationError, DomainError, build_basis


def _ep(a, b, x=()):
    return Episode(1, 1, a, b, 0, np.asarray(x, dtype=float))


def _const_basis(t_max):
    return build_basis(1, 0, t_max)


@pytest.mark.parametrize("order", [7, 11])
def test_rule_weights_and_exactness(order):
    rule = QuadratureRule.gauss_legendre(order)
    assert rule.weights.sum() == pytest.approx(2.0, abs=1e-14)
    assert (rule.weights > 0).all()
    for k in range(2 * order):
        exact = (1 - (-1) ** (k + 1)) / (k + 1)
        assert rule.weights @ rule.nodes**k == pytest.approx(exact, abs=1e-13)


def test_constant_zero_eta():
    eta = EtaEvaluator(_const_basis(2.0), [[0.0]])
    assert cumulative_hazard(eta, [_ep(0.0, 2.0)]) == pytest.approx(2.0, abs=1e-14)


def test_piecewise_constant_eta():
    eta = EtaEvaluator(_const_basis(2.0), [[0.0]], beta=[np.log(2.0)])
    value = cumulative_hazard(eta, [_ep(0.0, 1.0, [0.0]), _ep(1.0, 2.0, [1.0])])
    assert value == pytest.approx(3.0, abs=1e-14)


def test_empty_episode_list():
    with pytest.raises(DomainError):
        cumulative_hazard(EtaEvaluator(_const_basis(1.0), [[0.0]]), [])


def test_cubic_spline_against_riemann():
    basis = build_basis(6, 3, 5.0)
    alpha = np.random.default_rng(3).normal(scale=0.4, size=(1, 6))
    eta = EtaEvaluator(basis, alpha)
    ours = cumulative_hazard(eta, [_ep(0.0, 5.0)])
    ref = riemann(lambda s: np.exp(basis.design(s) @ alpha[0]), 0.0, 5.0)
    assert abs(ours - ref) / ref < 1e-6


def test_steep_spline_needs_higher_order():
    # a 20-fold hazard change inside one knot interval
    basis = build_basis(6, 3, 5.0)
    alpha = np.random.default_rng(3).normal(scale=0.7, size=(1, 6))
    eta = EtaEvaluator(basis, alpha)
    ref = riemann(lambda s: np.exp(basis.design(s) @ alpha[0]), 0.0, 5.0)
    err7 = abs(cumulative_hazard(eta, [_ep(0.0, 5.0)], QuadratureRule.gauss_legendre(7)) - ref) / ref
    err_default = abs(cumulative_hazard(eta, [_ep(0.0, 5.0)]) - ref) / ref
    assert err7 < 1e-5
    assert err_default < 1e-8


def test_moments_constant_phi():
    eta = EtaEvaluator(_const_basis(3.0), [[0.0]])
    s0, s1, s2 = weighted_moments(eta, [_ep(0.0, 3.0)], phi=lambda s: np.ones((len(s), 1)))
    assert (s0, s1[0], s2[0, 0]) == pytest.approx((3.0, 3.0, 3.0))


def test_moments_vanish_on_short_interval():
    basis = build_basis(6, 3, 1.0)
    eta = EtaEvaluator(basis, np.zeros((1, 6)))
    s0, s1, s2 = weighted_moments(eta, [_ep(0.0, 1e-12)])
    assert s0 < 1e-11 and np.abs(s1).max() < 1e-11 and np.abs(s2).max() < 1e-11


def test_vector_moment_against_riemann():
    basis = build_basis(6, 3, 4.0)
    rng = np.random.default_rng(4)
    alpha = rng.normal(scale=0.5, size=(2, 6))
    eta = EtaEvaluator(basis, alpha, z=[0.8])
    _, s1, s2 = weighted_moments(eta, [_ep(0.0, 4.0)])
    for k in range(12):
        ref = riemann(lambda s: np.exp(eta(s)) * eta.phi(s)[:, k], 0.0, 4.0)
        assert abs(s1[k] - ref) <= 1e-6 * max(abs(ref), 1e-12)
    assert np.allclose(s2, s2.T)
    assert np.linalg.eigvalsh(s2).min() > -1e-12


def test_moment_dimension_checked():
    eta = EtaEvaluator(build_basis(6, 3, 1.0), np.zeros((1, 6)))
    with pytest.raises(ConfigurationError):
        weighted_moments(eta, [_ep(0.0, 1.0)], phi=lambda s: np.ones((len(s), 2)))


def test_spline_values_match_recursion_at_nodes():
    basis = build_basis(6, 3, 3.0)
    _, s, _ = quadrature_nodes([0.2], [2.9], basis.breakpoints, QuadratureRule.gauss_legendre())
    ref = np.array([de_boor(basis.knots, 3, float(t)) for t in s])
    np.testing.assert_allclose(basis.design(s), ref, atol=1e-12)


def test_nodes_respect_breakpoints():
    breaks = np.array([0.0, 1.0, 2.0, 3.0])
    owner, s, w = quadrature_nodes([0.5, 2.0], [2.5, 2.2], breaks, QuadratureRule.gauss_legendre(3))
    assert owner.tolist().count(0) == 9 and owner.tolist().count(1) == 3
    np.testing.assert_allclose(np.bincount(owner, w), [2.0, 0.2])


def test_additivity_and_monotonicity():
    basis = build_basis(6, 3, 6.0)
    eta = EtaEvaluator(basis, np.random.default_rng(5).normal(size=(1, 6)))
    whole = cumulative_hazard(eta, [_ep(0.0, 5.3)])
    split = cumulative_hazard(eta, [_ep(0.0, 2.17)]) + cumulative_hazard(eta, [_ep(2.17, 5.3)])
    assert abs(whole - split) <= 1e-10 * whole
    ts = np.linspace(0.1, 6.0, 30)
    vals = [cumulative_hazard(eta, [_ep(0.0, t)]) for t in ts]
    assert np.all(np.diff(vals) > 0)


def test_cauchy_schwarz_structure():
    rng = np.random.default_rng(6)
    basis = build_basis(6, 3, 5.0)
    for _ in range(10):
        eta = EtaEvaluator(basis, rng.normal(size=(1, 6)))
        s0, s1, s2 = weighted_moments(eta, [_ep(0.0, float(rng.uniform(1, 5)))])
        assert np.linalg.eigvalsh(s2 - np.outer(s1, s1) / s0).min() > -1e-10 * np.abs(s2).max()
