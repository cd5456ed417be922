import numpy as np
import pytest

import heisenberg_sde as hs
from heisenberg_sde.bismut import (
    DiscretePathFunctionals,
    PathFunctionals,
    bismut_state,
    compute_alpha_tilde,
    path_functionals,
)
from heisenberg_sde.paths import BrownianGrid

import oracles


def gauss(p):
    return np.exp(-0.5 * np.sum(p * p, axis=1))


@pytest.fixture(scope="module")
def grid():
    return hs.sample_brownian(2, 32, 0.5, seed=21, n_paths=400)


@pytest.mark.parametrize("scheme", ["discrete", "continuum"])
def test_q_is_symmetric_positive(kohn, grid, scheme):
    q = path_functionals(kohn, grid, 0.5, scheme).q
    assert np.all(np.abs(q - np.swapaxes(q, 1, 2)) <= 1e-12 * np.abs(q).max())
    assert np.all(np.linalg.eigvalsh(q)[:, 0] > 0)


def test_q11_mean(kohn):
    g = hs.sample_brownian(2, 64, 1.0, seed=4, n_paths=20000)
    q = hs.compute_Q(kohn, g, 1.0)[:, 0, 0]
    se = q.std(ddof=1) / np.sqrt(q.size)
    # trapezoid quadrature of the path carries an O(dt) bias well under the noise here
    assert abs(q.mean() - oracles.q11_mean(1.0)) < 3 * se


def test_alpha_tilde_examples(kohn, grid):
    v = np.array([0.7])
    got = compute_alpha_tilde(kohn, grid, 0.5, [0.0, 0.0], v, [1.0, 2.0])
    assert np.all(got == v)
    lin = compute_alpha_tilde(kohn, grid, 0.5, [1.0, -0.5], [0.0], [0.0, 0.0])[:, 0]
    assert abs(lin.mean()) < 3 * lin.std(ddof=1) / np.sqrt(lin.size)


def _perturbed(grid, h, eps):
    return BrownianGrid.from_cum(grid.cum + eps * h, grid.t_final)


def test_malliavin_derivatives_match_central_differences(skew_group, grid):
    """Q and alpha_tilde are at most quadratic in B, so central differences are exact."""
    gs = skew_group
    t = 0.5
    direction = hs.CameronMartinDirection.quadratic_beta(gs, grid, t, 0)
    h = direction.values
    eps = 1e-3
    plus, minus = _perturbed(grid, h, eps), _perturbed(grid, h, -eps)
    fd_q = (hs.compute_Q(gs, plus, t) - hs.compute_Q(gs, minus, t)) / (2 * eps)
    assert np.allclose(hs.malliavin_derivative(gs, grid, t, direction, "Q"), fd_q, rtol=1e-6, atol=1e-9)

    w, v, x = np.array([0.3, -1.0]), np.array([0.2]), np.array([0.5, 0.1])
    fd_a = (compute_alpha_tilde(gs, plus, t, w, v, x) - compute_alpha_tilde(gs, minus, t, w, v, x)) / (2 * eps)
    got = hs.malliavin_derivative(gs, grid, t, direction, "alpha_tilde", context=(w, v, x))
    assert np.allclose(got, fd_a, rtol=1e-6, atol=1e-9)

    lin = hs.CameronMartinDirection.linear_h(gs.m, grid.n_steps, t, 1)
    fd = (hs.compute_Q(gs, _perturbed(grid, lin.values, eps), t)
          - hs.compute_Q(gs, _perturbed(grid, lin.values, -eps), t)) / (2 * eps)
    assert np.allclose(hs.malliavin_derivative(gs, grid, t, lin, "Q"), fd, rtol=1e-6, atol=1e-9)


def test_malliavin_derivative_rejects_bad_inputs(kohn, grid):
    short = np.zeros((1, 5, 2))
    with pytest.raises(hs.GridMismatch):
        hs.malliavin_derivative(kohn, grid, 0.5, short, "Q")
    lin = hs.CameronMartinDirection.linear_h(2, grid.n_steps, 0.5, 0)
    with pytest.raises(hs.InvalidParam):
        hs.malliavin_derivative(kohn, grid, 0.5, lin, "alpha_tilde")
    with pytest.raises(hs.InvalidParam):
        hs.malliavin_derivative(kohn, grid, 0.5, lin, "R")


def test_state_bundle(kohn, grid):
    st = bismut_state(kohn, grid, 0.5, [1.0, 0.0], [0.0], [0.0, 0.0])
    assert st.q_mat.shape == (grid.n_paths, 1, 1)
    assert set(st.malliavin_q) == {"h0", "h1", "beta0"}
    assert st.m_weight.shape == (grid.n_paths,)


def test_weight_basis_reassembles_weight(skew_group, grid):
    w, v, x = np.array([0.4, 1.0]), np.array([-0.3]), np.array([0.2, -0.6])
    for cls in (DiscretePathFunctionals, PathFunctionals):
        pf = cls(skew_group, grid, 0.5)
        base, per = pf.weight_basis(w)
        coef = v - np.einsum("a,lab,b->l", skew_group.theta_inv @ w, skew_group.a_mats, x)
        assert np.allclose(base + per @ coef, pf.weight(w, v, x), rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("t", [0.25, 1.0])
def test_weight_has_mean_zero(kohn, t):
    res = hs.bismut_gradient(kohn, lambda p: np.ones(len(p)), t, [0.3, 0.1, 0.2], [0.0, 1.0], [0.5], 20000, 3)
    assert abs(res.zscore(0.0)) < 3


def test_linear_targets(kohn):
    z = [0.2, -0.4, 0.1]
    gx = hs.bismut_gradient(kohn, lambda p: p[:, 0], 0.5, z, [0.6, -0.8], [0.0], 20000, 5)
    assert abs(gx.zscore(0.6)) < 3
    gy = hs.bismut_gradient(kohn, lambda p: p[:, 2], 0.5, z, [0.0, 0.0], [1.0], 20000, 6)
    assert abs(gy.zscore(1.0)) < 3


def test_fd_of_linear_function_is_exact(kohn):
    for eps in (1e-2, 1e-4):
        res = hs.gradient_fd_oracle(kohn, lambda p: p[:, 0], 0.5, [0.0, 0.0, 0.0], [0.6, 0.8], [0.0], eps, 500, 1)
        assert res.value == pytest.approx(0.6, abs=1e-10)
        assert res.stderr < 1e-10


def test_discrete_weight_matches_fd_on_smooth_target(kohn):
    z = [0.3, -0.2, 0.4]
    w, v = [0.0, 1.0], [0.5]
    bis = hs.bismut_gradient(kohn, gauss, 0.5, z, w, v, 40000, 10, n_steps=16)
    fd = hs.gradient_fd_oracle(kohn, gauss, 0.5, z, w, v, 1e-3, 40000, 11, n_steps=16)
    assert abs(bis.value - fd.value) < 3 * np.hypot(bis.stderr, fd.stderr)


def test_second_gradient_of_linear_is_zero(kohn):
    res = hs.second_gradient(kohn, lambda p: p[:, 0], 0.5, [0.0, 0.0, 0.0], ([1.0, 0.0], [0.0]),
                             ([0.0, 1.0], [0.0]), 1600, 2, n_inner=1600, n_steps=16)
    assert abs(res.zscore(0.0)) < 3


def test_budget_and_scheme_errors(kohn, grid):
    with pytest.raises(hs.BudgetExceeded):
        hs.second_gradient(kohn, gauss, 0.5, [0, 0, 0], ([1, 0], [0]), ([0, 1], [0]), 10_000, 0,
                           n_inner=10_000, max_work=1_000_000)
    with pytest.raises(hs.InvalidParam):
        path_functionals(kohn, grid, 0.5, scheme="midpoint")
