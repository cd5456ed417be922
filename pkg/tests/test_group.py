import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import frozen
import heisenberg_sde as hs
from heisenberg_sde.group import hs_lower_bound_holds, star_matrices, vector_fields

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)
point3 = st.tuples(finite, finite, finite)


def test_kohn_structure(kohn):
    assert np.array_equal(kohn.g_mats[0], [[0.0, 1.0], [-1.0, 0.0]])
    assert np.array_equal(kohn.z_drift, [0.0])
    assert kohn.eps_certificate.exact_orthogonal
    assert kohn.eps_certificate.eps_estimate == 0.0


def test_kohn_product_matches_hand_value(kohn):
    got = hs.group_mul(kohn, [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    assert tuple(got) == frozen.KOHN_PRODUCT_E1_E2


def test_skew_theta_product(skew_group):
    got = hs.group_mul(skew_group, [1.0, 2.0, 3.0], [-1.0, 0.5, 2.0])
    assert got == pytest.approx(frozen.SKEW_PRODUCT, abs=1e-14)


def test_sigma_at_e1(kohn):
    assert np.array_equal(hs.sigma_at(kohn, [1.0, 0.0]), np.array(frozen.KOHN_SIGMA_E1))


def test_sigma_at_origin_has_zero_vertical_rows(group3):
    s = hs.sigma_at(group3, np.zeros(3))
    assert np.all(s[3:] == 0.0)
    assert np.array_equal(s[:3], group3.theta)


def test_identity_and_inverse(skew_group):
    p = np.array([0.4, -1.1, 2.5])
    zero = np.zeros(3)
    assert np.array_equal(hs.group_mul(skew_group, p, zero), p)
    assert np.array_equal(hs.group_mul(skew_group, zero, p), p)
    assert np.allclose(hs.group_mul(skew_group, p, hs.group_inv(skew_group, p)), 0.0, atol=1e-15)


@given(point3, point3, point3)
def test_associativity_property(a, b, c):
    gs = hs.kohn_laplacian_group(n_samples=10)
    left = hs.group_mul(gs, hs.group_mul(gs, a, b), c)
    right = hs.group_mul(gs, a, hs.group_mul(gs, b, c))
    assert np.allclose(left, right, rtol=1e-12, atol=1e-12)


@given(point3)
def test_inverse_property(a):
    gs = hs.build_group([[2.0, 1.0], [0.0, 1.0]], [[[0.0, 1.0], [-1.0, 0.0]]], n_samples=10)
    inv = hs.group_inv(gs, a)
    assert np.allclose(hs.group_mul(gs, a, inv), 0.0, atol=1e-12)
    assert np.allclose(hs.group_mul(gs, inv, a), 0.0, atol=1e-12)


def test_generator_examples(kohn):
    z = np.array([0.7, -0.3, 1.2])
    assert hs.apply_generator(kohn, lambda p: np.full(len(p), 3.0), z) == pytest.approx(0.0, abs=1e-9)
    assert hs.apply_generator(kohn, lambda p: p[:, 0], z) == pytest.approx(0.0, abs=1e-9)
    sq = lambda p: p[:, 0] ** 2 + p[:, 1] ** 2
    assert hs.apply_generator(kohn, sq, z) == pytest.approx(kohn.m, rel=1e-6)


def test_generator_is_left_invariant(kohn):
    """U_i (f o L_g) at z equals (U_i f) at g * z."""
    f = lambda p: np.sin(p[:, 0]) * np.cos(p[:, 1]) + 0.3 * p[:, 2] ** 2
    g = np.array([0.5, -0.8, 0.3])
    z = np.array([0.2, 0.1, -0.4])
    shifted = lambda p: f(hs.group_mul(kohn, g, p))
    lhs = hs.apply_generator(kohn, shifted, z)
    rhs = hs.apply_generator(kohn, f, hs.group_mul(kohn, g, z))
    assert lhs == pytest.approx(rhs, abs=1e-6)


def test_vector_fields_are_sigma_columns(group3):
    z = np.array([0.1, 0.2, 0.3, 4.0, 5.0])
    assert np.array_equal(vector_fields(group3, z), hs.sigma_at(group3, z[:3]))


def test_star_kohn_family():
    theta, mats = star_matrices([0.5], [-0.5])
    assert np.array_equal(mats[0], [[0.0, 0.5], [-0.5, 0.0]])
    gs = hs.star_group([2.0], [0.0])
    assert gs.eps_certificate.eps_estimate == 0.0


def test_star_m3_brackets_are_not_orthogonal():
    # the star pattern with two vertical directions shares the first
    # horizontal axis, so G_1^T G_2 has a nonzero entry
    gs = hs.star_group([1.0, 0.0], [0.0, 1.0])
    cross = gs.g_mats[0].T @ gs.g_mats[1]
    assert np.count_nonzero(cross) == 1
    assert not gs.eps_certificate.exact_orthogonal


def test_equal_brackets_fail_hypothesis():
    a = [[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]
    gs = hs.build_group(np.eye(3), [a, a], n_samples=5000)
    rep = gs.eps_certificate
    assert not rep.passed
    assert rep.eps_estimate == pytest.approx(1.0, abs=1e-12)


def test_lower_bound_holds_on_kohn(kohn):
    assert hs_lower_bound_holds(kohn)


def test_validation_errors():
    with pytest.raises(hs.SingularTheta):
        hs.build_group([[1.0, 2.0], [2.0, 4.0]], [[[0.0, 1.0], [-1.0, 0.0]]])
    with pytest.raises(hs.DegenerateG):
        hs.build_group(np.eye(2), [[[1.0, 0.0], [0.0, 1.0]]])
    with pytest.raises(hs.DimensionMismatch):
        hs.build_group(np.eye(2), [np.eye(3)])
    with pytest.raises(hs.DimensionMismatch):
        hs.group_mul(hs.kohn_laplacian_group(), [1.0, 2.0], [0.0, 0.0, 0.0])


def test_group_from_config_forms():
    a = hs.group_from_config({"remark31": {"a": [0.5], "beta": [-0.5]}})
    b = hs.group_from_config({"m": 2, "d": 1, "theta": [1, 0, 0, 1], "a_mats": [[0, 0.5, -0.5, 0]]})
    assert np.array_equal(a.law_mats, b.law_mats)
    with pytest.raises(hs.DimensionMismatch):
        hs.group_from_config({"m": 2, "d": 2, "theta": [1, 0, 0, 1], "a_mats": [[0, 0.5, -0.5, 0]]})


def test_structure_is_read_only(kohn):
    with pytest.raises(ValueError):
        kohn.theta[0, 0] = 2.0
