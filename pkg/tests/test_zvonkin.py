import io
import math

import numpy as np
import pytest

import frozen
import heisenberg_sde as hs
from heisenberg_sde.drifts import with_cutoff
from heisenberg_sde.lattice import SpaceLattice
from heisenberg_sde.zvonkin import (
    _exp_linear_weights,
    check_qn3,
    grad_sigma_field,
    load_checkpoint,
    offset_nodes,
    save_checkpoint,
    transformed_residuals,
)

import oracles


def small_grid(hw=2.0, nodes=9, n_paths=64, seed=0, **kw):
    return hs.ResolventGrid(SpaceLattice.cube(hw, nodes, 3), T=1.0, n_times=5, n_fine=64,
                            n_paths=n_paths, seed=seed, **kw)


@pytest.fixture(scope="module")
def bump_solution():
    gs = hs.kohn_laplacian_group()
    drift = hs.bump_drift(2, 1, amplitude=2.0)
    return gs, drift, hs.picard_solve_xi(gs, drift, 16.0, small_grid())


def test_exp_linear_weights_integrate_exactly():
    lam, h = 3.0, np.array([0.5, 1e-5])
    left, right = _exp_linear_weights(lam, h)
    # hat functions sum to 1, so the two weights integrate e^{-lam r} over [0, h]
    assert np.allclose(left + right, (1 - np.exp(-lam * h)) / lam, rtol=1e-12)


def test_offset_nodes():
    ks = offset_nodes(64, 2.0)
    assert ks[0] == 0 and ks[-1] == 64 and list(ks) == [0, 1, 2, 4, 8, 16, 32, 64]
    assert list(offset_nodes(0)) == [0]


def test_q_lambda_of_constant_is_exact(kohn):
    rg = small_grid(nodes=5)
    out = hs.apply_q_lambda(kohn, lambda t, p: np.full((len(p), 1), 2.0), 4.0, rg)
    for i, s in enumerate(rg.times):
        assert np.allclose(out[i], oracles.q_lambda_constant(2.0, 4.0, 1.0 - s), rtol=1e-12, atol=1e-15)


def test_q_lambda_of_zero(kohn):
    rg = small_grid(nodes=5)
    assert not np.any(hs.apply_q_lambda(kohn, np.zeros((5, 5, 5, 5, 2)), 4.0, rg))


@pytest.mark.parametrize("lam", [4.0, 16.0])
def test_q_lambda_of_gaussian(kohn, lam):
    rg = hs.ResolventGrid(SpaceLattice.cube(1.0, 3, 3), T=1.0, n_times=2, n_fine=256, n_paths=4096, seed=3,
                          ratio=math.sqrt(2.0))
    f = lambda t, p: np.exp(-0.5 * np.sum(p[:, :2] ** 2, axis=1))[:, None]
    out = hs.apply_q_lambda(kohn, f, lam, rg)[0, ..., 0]
    # nodes (0,0), (1,0), (1,1) give |x|^2 = 0, 1, 2; the frozen table has 0, 0.5, 1
    assert out[1, 1, 1] == pytest.approx(frozen.Q_LAMBDA_GAUSSIAN[lam][0], rel=5e-3)
    assert out[2, 1, 1] == pytest.approx(frozen.Q_LAMBDA_GAUSSIAN[lam][2], rel=5e-3)


def test_gridded_q_lambda_matches_callable(kohn):
    rg = small_grid(nodes=17)
    pts = rg.lattice.node_points()
    f = lambda t, p: (np.cos(p[:, :1]) * np.exp(-p[:, 2:3] ** 2)) * (1.0 + 0.1 * t)
    gridded = np.stack([f(t, pts) for t in rg.times]).reshape((5,) + rg.lattice.shape + (1,))
    a = hs.apply_q_lambda(kohn, f, 8.0, rg)
    b = hs.apply_q_lambda(kohn, gridded, 8.0, rg)
    # multilinear interpolation error is O(h^2); away from the box faces it is small
    inner = (slice(None), slice(4, -4), slice(4, -4), slice(4, -4))
    assert np.max(np.abs(a - b)[inner]) < 0.03 * np.max(np.abs(a))


def test_control_variate_keeps_the_mean(kohn):
    f = lambda t, p: np.sin(p[:, :1]) + 0.5 * p[:, 2:3] ** 2
    a = hs.apply_q_lambda(kohn, f, 4.0, small_grid(nodes=5, n_paths=4000, control_variate=True))
    b = hs.apply_q_lambda(kohn, f, 4.0, small_grid(nodes=5, n_paths=4000, control_variate=False))
    assert np.max(np.abs(a - b)) < 0.02


def test_zero_drift_gives_zero_solution(kohn):
    sol = hs.picard_solve_xi(kohn, hs.zero_drift(2, 1), 4.0, small_grid(nodes=5))
    assert not np.any(sol.u_values)
    assert len(sol.iteration_history) == 1 and sol.converged
    zmap = hs.build_zvonkin_map(sol)
    z = np.array([[0.3, -0.2, 0.9]])
    assert np.array_equal(zmap(0.5, z), z)
    assert zmap.grad_bound == 0.0 and zmap.qn3_passed


def test_terminal_value_and_contraction(bump_solution):
    gs, drift, sol = bump_solution
    assert not np.any(sol.u_values[-1])
    assert sol.converged
    assert all(r < 0.5 for r in sol.ratios)
    assert sol.contraction_certificate()
    assert sol.b_norm(gs) > sol.sup_norm > 0


def test_grad_sigma_exact_on_affine_fields(kohn):
    lat = SpaceLattice.cube(1.0, 5, 3)
    pts = lat.node_points()
    coef = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, 1.0], [2.0, 0.0, -1.0]])
    u = (pts @ coef.T + 0.25).reshape(lat.shape + (3,))
    got = grad_sigma_field(kohn, u, lat)
    sig = hs.sigma_at(kohn, pts[:, :2]).reshape(lat.shape + (3, 2))
    assert np.allclose(got, np.einsum("kn,...ni->...ki", coef, sig), atol=1e-12)


def test_qn3_for_small_gradient(bump_solution):
    gs, drift, sol = bump_solution
    zmap = hs.build_zvonkin_map(sol, n_pairs=1000, seed=1)
    assert zmap.grad_bound <= 0.5
    assert zmap.qn3_checked and zmap.qn3_passed
    ok, worst = check_qn3(zmap, 200, seed=2)
    assert ok and worst > 0


def test_checkpoint_round_trip(bump_solution):
    gs, drift, sol = bump_solution
    buf = io.StringIO()
    save_checkpoint(sol, buf)
    text = buf.getvalue()
    assert text.startswith("# {")
    assert len(text.splitlines()) == 1 + sol.u_values.size
    back = load_checkpoint(gs, io.StringIO(text))
    assert np.array_equal(back.u_values, sol.u_values)
    assert back.lam == sol.lam and back.rgrid.spec() == sol.rgrid.spec()
    assert np.array_equal(back.grad_sigma_values, sol.grad_sigma_values)
    with pytest.raises(ValueError):
        load_checkpoint(gs, io.StringIO("1.0\n"))


def test_residual_is_cutoff_independent(bump_solution):
    """A cutoff that equals 1 on the support of the drift changes nothing."""
    gs, drift, sol = bump_solution
    zmap = hs.build_zvonkin_map(sol, check=False)
    grid = hs.sample_brownian(2, 32, 0.5, seed=5, n_paths=50)
    start = np.array([0.2, 0.0, 0.0])
    cut = with_cutoff(drift, 1.5)
    a = hs.euler_maruyama_singular(gs, drift, start, grid)
    b = hs.euler_maruyama_singular(gs, cut, start, grid)
    ra, _ = transformed_residuals(gs, 16.0, zmap, a, cutoff=1.5)
    rb, _ = transformed_residuals(gs, 16.0, zmap, b, cutoff=1.5)
    assert np.array_equal(ra, rb)


def test_residual_zero_for_zero_drift(kohn):
    sol = hs.picard_solve_xi(kohn, hs.zero_drift(2, 1), 4.0, small_grid(nodes=5))
    zmap = hs.build_zvonkin_map(sol)
    sde = hs.euler_maruyama_singular(kohn, hs.zero_drift(2, 1), np.zeros(3),
                                     hs.sample_brownian(2, 16, 0.5, seed=0, n_paths=3))
    assert hs.transformed_residual(kohn, hs.zero_drift(2, 1), 4.0, zmap, sde) == 0.0


def test_residual_reports_escape(bump_solution):
    gs, drift, sol = bump_solution
    zmap = hs.build_zvonkin_map(sol, check=False)
    grid = hs.sample_brownian(2, 32, 4.0, seed=9, n_paths=64)
    sde = hs.euler_maruyama_singular(gs, drift, np.zeros(3), grid, cutoff=1.0)
    i = int(np.flatnonzero(sde.escaped)[0])
    with pytest.raises(hs.PathEscaped) as info:
        hs.transformed_residual(gs, drift, 16.0, zmap, sde, path_index=i, cutoff=1.0)
    assert info.value.stopped_at == pytest.approx(sde.stopped_at[i])
    assert math.isfinite(info.value.residual)


def test_grid_validation():
    with pytest.raises(hs.DimensionMismatch):
        hs.ResolventGrid(SpaceLattice.cube(1.0, 3, 3), n_times=4, n_fine=64)
    with pytest.raises(hs.DimensionMismatch):
        hs.apply_q_lambda(hs.kohn_laplacian_group(), np.zeros((5, 3, 3, 3, 1)), 1.0, small_grid(nodes=5))
