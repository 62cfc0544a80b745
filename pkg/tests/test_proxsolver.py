import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import eps_norm_sup, prox_kkt_residual, prox_projected_gradient, sglasso_subgradient
from sgblasso.errors import DivergenceError
from sgblasso.proxsolver import (
    FistaConfig, eps_decomposition, eps_norm, fista_sglasso, lipschitz, prox_sgtv, sglasso_objective,
)

TRIPLE = np.array([[784.0, 77.0], [1216.0, 96.0], [4083.0, 1394.0]])


def test_prox_trivial_cases():
    assert np.all(prox_sgtv(np.zeros((4, 3)), 0.7, 0.3) == 0)
    c = np.random.Generator(np.random.Philox(0)).standard_normal((5, 2))
    np.testing.assert_array_equal(prox_sgtv(c, 0.0, 0.4), np.maximum(c, 0))
    with pytest.raises(ValueError):
        prox_sgtv(c, -1.0, 0.5)


def test_prox_matches_projected_gradient_example():
    c = np.random.Generator(np.random.Philox(11)).standard_normal((6, 3))
    ref = prox_projected_gradient(c, 0.3, 0.4, 6)
    assert np.max(np.abs(prox_sgtv(c, 0.3, 0.4, 6) - ref)) <= 1e-6


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 3.0), st.floats(0.0, 1.0))
def test_prox_kkt_and_nonexpansive(seed, alpha, beta):
    rng = np.random.Generator(np.random.Philox(seed))
    v, k = int(rng.integers(1, 10)), int(rng.integers(1, 5))
    c1, c2 = rng.standard_normal((v, k)), rng.standard_normal((v, k))
    z1, z2 = prox_sgtv(c1, alpha, beta), prox_sgtv(c2, alpha, beta)
    assert np.all(z1 >= 0)
    assert prox_kkt_residual(z1, c1, alpha, beta, v) <= 1e-8
    assert np.linalg.norm(z1 - z2) <= np.linalg.norm(c1 - c2) + 1e-12


def test_eps_norm_single_coordinate():
    for eps in (0.1, 0.5, 0.9):
        assert eps_norm(np.array([0.0, -2.5, 0.0]), eps) == pytest.approx(2.5, rel=1e-12)


def test_eps_norm_edge_cases():
    assert eps_norm(np.zeros(4), 0.3) == 0.0
    for bad in (0.0, 1.0, -0.2):
        with pytest.raises(ValueError):
            eps_norm(np.ones(3), bad)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1 - 1e-3))
def test_eps_decomposition(seed, eps):
    rng = np.random.Generator(np.random.Philox(seed))
    xi = rng.standard_normal(int(rng.integers(1, 30))) * rng.uniform(0.01, 100)
    nu, soft, rem = eps_decomposition(xi, eps)
    resid = np.sum(np.maximum(np.abs(xi) - (1 - eps) * nu, 0) ** 2) - (eps * nu) ** 2
    assert abs(resid) <= 1e-10 * max(1.0, nu**2)
    assert np.linalg.norm(soft) == pytest.approx(eps * nu, rel=1e-9, abs=1e-12)
    assert np.abs(rem).max() <= (1 - eps) * nu * (1 + 1e-12)
    np.testing.assert_allclose(soft + rem, xi)


def test_fista_zero_data():
    d = np.linalg.qr(np.random.Generator(np.random.Philox(0)).standard_normal((10, 3)))[0]
    res = fista_sglasso(d, np.zeros((10, 5)), 0.1, 0.5)
    assert np.all(res.weights == 0)
    assert res.weights.shape == (5, 3)


def test_fista_single_atom_least_squares(analytic):
    phi = analytic.atoms(TRIPLE[:1])
    c = np.array([0.3, 1.0, 0.0, 2.0])
    res = fista_sglasso(phi, phi @ c[None], 1e-12, 0.5)
    np.testing.assert_allclose(res.weights[:, 0], c, atol=1e-6)


def test_fista_matches_subgradient_oracle(analytic):
    rng = np.random.Generator(np.random.Philox(3))
    d = analytic.atoms(TRIPLE)
    c_true = rng.dirichlet(np.full(3, 0.5), size=16)
    x = d @ c_true.T
    alpha, beta = 1e-6, 0.9
    res = fista_sglasso(d, x, alpha, beta, FistaConfig(max_iters=20000, tol=1e-15))
    f_fista = sglasso_objective(d, x, res.weights, alpha, beta)
    _, f_oracle = sglasso_subgradient(d, x, alpha, beta, c_true, iters=20000)
    assert f_fista <= f_oracle + 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1.0), st.floats(0.01, 0.99))
def test_fista_monotone_with_restart(seed, alpha, beta):
    rng = np.random.Generator(np.random.Philox(seed))
    d = rng.standard_normal((12, 4))
    d /= np.linalg.norm(d, axis=0)
    x = rng.standard_normal((12, 6))
    res = fista_sglasso(d, x, alpha, beta, FistaConfig(max_iters=300))
    assert np.all(np.diff(res.objective) <= 1e-12)
    assert np.all(res.weights >= 0)


def test_fista_fixed_point_is_prox_stationary():
    rng = np.random.Generator(np.random.Philox(8))
    d = rng.standard_normal((15, 5))
    d /= np.linalg.norm(d, axis=0)
    x = np.abs(rng.standard_normal((15, 7)))
    alpha, beta = 0.05, 0.3
    lip = lipschitz(d)
    res = fista_sglasso(d, x, alpha, beta, FistaConfig(max_iters=20000, xtol=1e-14), lip=lip)
    c = res.weights
    step = 1.0 / lip
    again = prox_sgtv(c + step * (x - d @ c.T).T @ d, alpha * step, beta, v=7)
    assert np.max(np.abs(again - c)) <= 1e-8


def test_fista_errors():
    d = np.eye(3)
    with pytest.raises(ValueError):
        fista_sglasso(d, np.ones((4, 2)), 0.1, 0.5)
    with pytest.raises(DivergenceError):
        fista_sglasso(d, np.full((3, 2), np.nan), 0.1, 0.5)
    with pytest.raises(ValueError):
        FistaConfig(max_iters=0)


def test_lipschitz_bounds_spectrum():
    d = np.random.Generator(np.random.Philox(1)).standard_normal((20, 6))
    top = np.linalg.eigvalsh(d.T @ d).max()
    assert top <= lipschitz(d) <= 1.02 * top


def test_eps_norm_is_dual_of_blend():
    rng = np.random.Generator(np.random.Philox(9))
    xi = rng.standard_normal(6)
    eps = 0.35
    nu, soft, _ = eps_decomposition(xi, eps)
    # the maximiser of <xi, x> / ((1-eps)|x|_1 + eps|x|_2) is the soft-thresholded part
    assert eps_norm_sup(xi, eps, soft[None]) == pytest.approx(nu, rel=1e-12)
    assert eps_norm_sup(xi, eps, rng.standard_normal((5000, 6))) <= nu * (1 + 1e-12)
