"""Generalized Heisenberg group structures on R^{m+d}.

A structure is fixed by an invertible horizontal matrix ``theta`` and ``d``
matrices ``A_l``.  The horizontal vector fields are

    U_i(x, y) = sum_k theta[k, i] d/dx_k + sum_l (A_l x)_i d/dy_l,

so that ``sigma(x) = (theta; (A_1 x)^T; ...; (A_d x)^T)`` and the bracket
matrices are ``G_l = A_l theta - theta^T A_l^T``.
"""

from dataclasses import dataclass, field

import numpy as np

from ._validation import as_matrix, as_vector, check_positive, check_positive_int
from .errors import DegenerateG, DimensionMismatch, NonFinite, SingularTheta

#: relative singular-value floor below which theta is treated as singular
THETA_RCOND = 1e-12
DEFAULT_H_SAMPLES = 100_000


@dataclass(frozen=True)
class HReport:
    """Outcome of checking the cross-term hypothesis on the ``G_l``."""

    passed: bool
    eps_estimate: float
    exact_orthogonal: bool
    hs_lower_bound: float
    samples_used: int


@dataclass(frozen=True, eq=False)
class GroupStructure:
    m: int
    d: int
    theta: np.ndarray
    a_mats: np.ndarray
    g_mats: np.ndarray
    z_drift: np.ndarray
    eps_certificate: HReport = field(repr=False)
    theta_inv: np.ndarray = field(repr=False)
    # (Theta^*)^{-1} A_l, used by the group law
    law_mats: np.ndarray = field(repr=False)

    @property
    def dim(self):
        return self.m + self.d

    def split(self, z):
        z = np.asarray(z, dtype=float)
        return z[..., : self.m], z[..., self.m :]


def _derive_g(theta, a_mats):
    return np.stack([a @ theta - theta.T @ a.T for a in a_mats])


def build_group(theta, a_mats, n_samples=DEFAULT_H_SAMPLES, seed=0):
    """Validate ``theta`` and ``A_l`` and return an immutable :class:`GroupStructure`.

    Raises SingularTheta, DegenerateG (some ``G_l`` vanishes) or
    DimensionMismatch.  A failed sampled hypothesis check is *not* an error;
    it is recorded in ``eps_certificate``.
    """
    theta = as_matrix(theta, name="theta")
    m = theta.shape[0]
    if theta.shape != (m, m):
        raise DimensionMismatch(f"theta must be square, got {theta.shape}")
    if m < 2:
        raise DimensionMismatch("horizontal dimension m must be >= 2")
    a_list = list(a_mats) if not isinstance(a_mats, np.ndarray) or a_mats.ndim == 3 else [a_mats]
    if len(a_list) < 1:
        raise DimensionMismatch("need at least one A_l (d >= 1)")
    a_arr = np.stack([as_matrix(a, (m, m), name=f"a_mats[{i}]") for i, a in enumerate(a_list)])

    svals = np.linalg.svd(theta, compute_uv=False)
    if not np.all(np.isfinite(svals)) or svals[-1] < THETA_RCOND * svals[0]:
        raise SingularTheta(f"theta is singular (singular values {svals})")

    g_mats = _derive_g(theta, a_arr)
    g_norms = np.linalg.norm(g_mats, axis=(1, 2))
    if np.any(g_norms == 0.0):
        bad = [int(i) for i in np.flatnonzero(g_norms == 0.0)]
        raise DegenerateG(f"G_l vanishes for l in {bad}")

    z_drift = np.array([np.trace(theta @ a) for a in a_arr])
    theta_inv = np.linalg.inv(theta)
    law_mats = np.stack([np.linalg.solve(theta.T, a) for a in a_arr])
    for arr in (theta, a_arr, g_mats, z_drift, theta_inv, law_mats):
        arr.setflags(write=False)

    gs = GroupStructure(
        m=m,
        d=len(a_arr),
        theta=theta,
        a_mats=a_arr,
        g_mats=g_mats,
        z_drift=z_drift,
        eps_certificate=None,
        theta_inv=theta_inv,
        law_mats=law_mats,
    )
    object.__setattr__(gs, "eps_certificate", check_hypothesis_H(gs, n_samples, seed=seed))
    return gs


def star_matrices(a, beta):
    """Matrices with ``d = m - 1`` and ``theta = I``.

    ``A_l`` has ``a[l]`` at (0, l+1) and ``beta[l]`` at (l+1, 0).
    """
    a = as_vector(a, name="a")
    beta = as_vector(beta, size=a.shape[0], name="beta")
    d = a.shape[0]
    m = d + 1
    mats = np.zeros((d, m, m))
    for l in range(d):
        mats[l, 0, l + 1] = a[l]
        mats[l, l + 1, 0] = beta[l]
    return np.eye(m), mats


def star_group(a, beta, **kwargs):
    theta, mats = star_matrices(a, beta)
    return build_group(theta, mats, **kwargs)


def kohn_laplacian_group(**kwargs):
    """The 3-dimensional Heisenberg group (m=2, d=1, a=-beta=1/2)."""
    return star_group([0.5], [-0.5], **kwargs)


def check_hypothesis_H(gs, n_samples=DEFAULT_H_SAMPLES, seed=0):
    """Estimate the smallest eps with eps*sum a_l^2|G_l u|^2 >= sum_{l!=k}|a_l a_k <G_l u, G_k u>|.

    If every ``G_l^T G_k`` (l != k) vanishes the answer is exactly 0.  Otherwise
    unit vectors ``a`` and ``u`` are sampled uniformly and the largest
    per-sample ratio is returned; ``passed`` means the estimate is below 1.
    """
    n_samples = check_positive_int(n_samples, "n_samples")
    g = gs.g_mats
    d = g.shape[0]
    min_hs2 = float(np.min(np.sum(g * g, axis=(1, 2))))

    cross = [g[l].T @ g[k] for l in range(d) for k in range(d) if l != k]
    exact = all(not np.any(c) for c in cross)
    if exact:
        return HReport(True, 0.0, True, min_hs2, 0)

    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0xA11CE], dtype=np.uint64)))
    a = rng.standard_normal((n_samples, d))
    # the ratio peaks where coefficient magnitudes tie, which random draws never hit exactly
    ties = [np.eye(d)[l] + s * np.eye(d)[k] for l in range(d) for k in range(l + 1, d) for s in (1.0, -1.0)]
    ties.append(np.ones(d))
    ties = np.array(ties)
    a[: min(len(ties), n_samples)] = ties[:n_samples]
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    u = rng.standard_normal((n_samples, gs.m))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    gu = np.einsum("lij,nj->nli", g, u)
    gram = np.einsum("nli,nki->nlk", gu, gu)
    weights = a[:, :, None] * a[:, None, :]
    diag = np.einsum("nll->n", weights * gram)
    off = np.sum(np.abs(weights * gram), axis=(1, 2)) - np.einsum("nll->n", np.abs(weights * gram))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(off == 0.0, 0.0, off / diag)
    eps = float(np.max(ratio))
    passed = bool(eps < 1.0)
    lower = (1.0 - eps) * min_hs2 if passed else 0.0
    return HReport(passed, eps, False, lower, n_samples)


def group_mul(gs, p1, p2):
    """Group product ``(x, y) * (x', y') = (x + x', y + y' + <(theta^*)^{-1} A_l x, x'>)``.

    Broadcasts over leading axes.
    """
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    if p1.shape[-1] != gs.dim or p2.shape[-1] != gs.dim:
        raise DimensionMismatch(f"points must have dimension {gs.dim}")
    x1, y1 = gs.split(p1)
    x2, y2 = gs.split(p2)
    corr = np.einsum("lij,...j,...i->...l", gs.law_mats, x1, x2)
    return np.concatenate([x1 + x2, y1 + y2 + corr], axis=-1)


def group_inv(gs, p):
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != gs.dim:
        raise DimensionMismatch(f"points must have dimension {gs.dim}")
    x, y = gs.split(p)
    corr = np.einsum("lij,...j,...i->...l", gs.law_mats, x, x)
    return np.concatenate([-x, -y + corr], axis=-1)


def sigma_at(gs, x):
    """Diffusion matrix ``sigma(x)`` of shape (m+d, m); broadcasts over leading axes of ``x``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != gs.m:
        raise DimensionMismatch(f"x must have dimension {gs.m}, got {x.shape[-1]}")
    bottom = np.einsum("lij,...j->...li", gs.a_mats, x)
    top = np.broadcast_to(gs.theta, x.shape[:-1] + gs.theta.shape)
    return np.concatenate([top, bottom], axis=-2)


def vector_fields(gs, z):
    """Columns ``U_i(z) = sigma(x) e_i`` as an array of shape (..., m+d, m)."""
    x, _ = gs.split(z)
    return sigma_at(gs, x)


def apply_generator(gs, f, z, h=1e-3):
    """Approximate ``(1/2) sum_i U_i^2 f`` at ``z``.

    ``U_i f`` is a central difference along the (position dependent) field
    ``U_i``; applying it twice picks up the first-order term from the
    non-constant coefficients, so the result is O(h^2) accurate.
    """
    check_positive(h, "h")
    z = as_vector(z, gs.dim, name="z")

    def along(g, point, i):
        step = h * vector_fields(gs, point)[:, i]
        return (g(point + step) - g(point - step)) / (2.0 * h)

    def scalar(point):
        val = float(np.asarray(f(np.asarray(point)[None, :])).reshape(-1)[0])
        if not np.isfinite(val):
            raise NonFinite("f returned a non-finite value")
        return val

    total = 0.0
    for i in range(gs.m):
        total += along(lambda p: along(scalar, p, i), z, i)
    return 0.5 * total


def hs_lower_bound_holds(gs, n_samples=1000, seed=1):
    """Sampled check of ||sum_l a_l G_l||_HS^2 >= hs_lower_bound |a|^2."""
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0x32], dtype=np.uint64)))
    a = rng.standard_normal((n_samples, gs.d))
    comb = np.einsum("nl,lij->nij", a, gs.g_mats)
    lhs = np.sum(comb * comb, axis=(1, 2))
    rhs = gs.eps_certificate.hs_lower_bound * np.sum(a * a, axis=1)
    return bool(np.all(lhs >= rhs * (1 - 1e-12)))


def group_from_config(cfg):
    """Build a group from a parsed config mapping.

    Either ``{"remark31": {"a": [...], "beta": [...]}}`` or explicit
    ``m``, ``d``, ``theta`` (row-major) and ``a_mats`` (list of row-major lists).
    """
    if "remark31" in cfg:
        spec = cfg["remark31"]
        return star_group(spec["a"], spec["beta"])
    m, d = int(cfg["m"]), int(cfg["d"])
    theta = np.asarray(cfg["theta"], dtype=float).reshape(m, m)
    mats = np.asarray(cfg["a_mats"], dtype=float)
    if mats.size != d * m * m:
        raise DimensionMismatch(f"a_mats must hold {d} matrices of size {m}x{m}")
    return build_group(theta, mats.reshape(d, m, m))


__all__ = [
    "GroupStructure",
    "HReport",
    "apply_generator",
    "build_group",
    "check_hypothesis_H",
    "group_from_config",
    "group_inv",
    "group_mul",
    "hs_lower_bound_holds",
    "kohn_laplacian_group",
    "star_group",
    "star_matrices",
    "sigma_at",
    "vector_fields",
]
