"""Bismut-type gradient estimators for the reference flow.

For a direction ``(w, v)`` the gradient ``grad_{(w,v)} P_t f(z)`` equals
``E[f(X_t, Y_t) M_t]`` with an explicit Skorohod-integral weight ``M_t``.  The
weight is assembled from Wiener functionals of the driving path: the random
covariance ``Q_t``, the shifted direction ``alpha_tilde`` and their Malliavin
derivatives along ``h_i(s) = s e_i`` and ``beta_k(s) = int_0^s G_k B_r dr``.

Time integrals use the trapezoid rule and stochastic integrals the left-point
rule.  All Malliavin derivatives are closed form (the functionals are at most
quadratic in the path).
"""

from dataclasses import dataclass, field

import numpy as np

from ._validation import as_vector, check_positive, check_positive_int
from .errors import BudgetExceeded, DimensionMismatch, GridMismatch, InvalidParam, NearSingularQ
from .estimators import DEFAULT_CHUNK, EstimatorResult, map_path_chunks, mean_result
from .group import group_mul
from .paths import flow_endpoints, sample_brownian, steps_for

#: Q is regularised by eta*I with eta = REG_SCALE * trace(Q) / d
REG_SCALE = 1e-10
#: a sample is flagged when lambda_min(Q) < FLAG_FACTOR * eta
FLAG_FACTOR = 1e3
#: estimators refuse to report when more than this fraction is flagged
MAX_FLAGGED = 1e-3
SECOND_GRADIENT_GROUPS = 16
DEFAULT_INNER_BUDGET = 50_000_000


def _trap_weights(n_steps, dt):
    wts = np.full(n_steps + 1, dt)
    wts[0] = wts[-1] = 0.5 * dt
    return wts


def _cum_trapz(values, dt):
    out = np.zeros_like(values)
    np.cumsum(0.5 * dt * (values[:, 1:] + values[:, :-1]), axis=1, out=out[:, 1:])
    return out


@dataclass(eq=False)
class CameronMartinDirection:
    """A Cameron-Martin direction sampled at the grid nodes.

    ``values`` has shape (1 or n_paths, n_nodes, m).  ``kind`` is
    ``"linear_h"`` or ``"quadratic_beta"``; ``index`` is i or k.
    """

    kind: str
    index: int
    values: np.ndarray
    t: float

    @classmethod
    def linear_h(cls, m, n_steps, t, i):
        s = np.linspace(0.0, t, n_steps + 1)
        vals = np.zeros((1, n_steps + 1, m))
        vals[0, :, i] = s
        return cls("linear_h", i, vals, t)

    @classmethod
    def quadratic_beta(cls, gs, grid, t, k):
        g = grid.up_to(t)
        gb = g.cum @ gs.g_mats[k].T
        return cls("quadratic_beta", k, _cum_trapz(gb, g.dt), t)


class PathFunctionals:
    """Per-path Wiener functionals on [0, t] shared by every direction ``(w, v, x)``.

    All arrays carry a leading path axis.
    """

    def __init__(self, gs, grid, t):
        if grid.m != gs.m:
            raise DimensionMismatch(f"grid has m={grid.m}, group has m={gs.m}")
        check_positive(t, "t")
        g = grid.up_to(t)
        self.gs, self.t, self.grid = gs, float(t), g
        n, dt = g.n_steps, g.dt
        self.wts = _trap_weights(n, dt)
        self.s = g.times
        b = g.cum
        self.b_end = b[:, -1]
        self.b_int = np.einsum("j,pja->pa", self.wts, b)
        self.b_bar = self.b_int / t
        centred = b - self.b_bar[:, None, :]
        self.gc = np.einsum("lab,pjb->pjla", gs.g_mats, centred)
        self.q = np.einsum("j,pjla,pjka->plk", self.wts, self.gc, self.gc)
        self.q = 0.5 * (self.q + np.swapaxes(self.q, 1, 2))
        gb = np.einsum("kab,pjb->pjka", gs.g_mats, b)
        # left-point int_0^t <G_k B, dB>
        self.ito_g = np.einsum("pjka,pja->pk", gb[:, :-1], g.increments)
        self.beta = _cum_trapz(gb, dt)
        self.beta_end = self.beta[:, -1]
        self.beta_int = np.einsum("j,pjka->pka", self.wts, self.beta)
        self.s_int = float(self.wts @ self.s)

        d = gs.d
        trace = np.trace(self.q, axis1=1, axis2=2)
        self.eta = REG_SCALE * trace / d
        eig_min = np.linalg.eigvalsh(self.q)[:, 0]
        self.flagged = eig_min < FLAG_FACTOR * self.eta
        self.q_reg = self.q + self.eta[:, None, None] * np.eye(d)
        self.q_inv = np.linalg.inv(self.q_reg)

        # D_{h_i} Q and D_{beta_k} Q, shapes (P, m, d, d) and (P, d, d, d)
        self.dq_h = np.stack(
            [self.dq(CameronMartinDirection.linear_h(gs.m, n, t, i).values) for i in range(gs.m)], axis=1
        )
        self.dq_beta = np.stack([self.dq(self.beta[:, :, k]) for k in range(d)], axis=1)

    @property
    def n_paths(self):
        return self.q.shape[0]

    def dq(self, h_values):
        """Closed-form D_h Q for h given at the nodes."""
        h_values = np.asarray(h_values, dtype=float)
        if h_values.shape[-2] != self.wts.shape[0] or h_values.shape[-1] != self.gs.m:
            raise GridMismatch("direction is not sampled on the path grid")
        h_bar = np.einsum("j,pja->pa", self.wts, h_values) / self.t
        gh = np.einsum("lab,pjb->pjla", self.gs.g_mats, h_values - h_bar[:, None, :])
        half = np.einsum("j,pjla,pjka->plk", self.wts, gh, self.gc)
        return half + np.swapaxes(half, 1, 2)

    def alpha_tilde(self, w, v, x):
        gs = self.gs
        w_t = gs.theta_inv @ w
        const = v - np.einsum("a,lab,b->l", w_t, gs.a_mats, x)
        return const[None, :] - np.einsum("a,lab,pb->pl", w_t, gs.g_mats, self.b_int) / self.t

    def dalpha(self, w, h_values):
        h_int = np.einsum("j,pja->pa", self.wts, np.asarray(h_values, dtype=float))
        w_t = self.gs.theta_inv @ w
        return -np.einsum("a,lab,pb->pl", w_t, self.gs.g_mats, h_int) / self.t

    def _dalpha_basis(self, w):
        w_t = self.gs.theta_inv @ w
        g = self.gs.g_mats
        # h_i: int h_i = s_int * e_i
        da_h = -self.s_int / self.t * np.einsum("a,lai->il", w_t, g)[None]
        da_beta = -np.einsum("a,lab,pkb->pkl", w_t, g, self.beta_int) / self.t
        return np.broadcast_to(da_h, (self.n_paths,) + da_h.shape[1:]), da_beta

    def _c_terms(self, alpha, da_h, da_beta):
        """Weight contributions that depend on c = Q^{-1} alpha_tilde and its derivatives."""
        qi = self.q_inv
        c = np.einsum("plk,pk->pl", qi, alpha)
        dc_h = np.einsum("plk,pik->pil", qi, da_h - np.einsum("pikl,pl->pik", self.dq_h, c))
        dc_beta = np.einsum("plk,pjk->pjl", qi, da_beta - np.einsum("pjkl,pl->pjk", self.dq_beta, c))
        t = self.t
        ito = np.sum(c * self.ito_g, axis=1)
        skew = -np.einsum("pkk->p", dc_beta)
        cross = -np.einsum("pk,pka,pa->p", c, self.beta_end, self.b_end) / t
        corr = np.einsum("pik,pki->p", dc_h, self.beta_end) / t
        trace = 0.5 * t * c @ np.trace(self.gs.g_mats, axis1=1, axis2=2)
        return ito + skew + cross + corr + trace, c

    def weight(self, w, v, x):
        """M_t for direction ``(w, v)`` at horizontal start ``x``; shape (P,)."""
        gs = self.gs
        w = as_vector(w, gs.m, name="w")
        v = as_vector(v, gs.d, name="v")
        x = as_vector(x, gs.m, name="x")
        alpha = self.alpha_tilde(w, v, x)
        da_h, da_beta = self._dalpha_basis(w)
        corr, _ = self._c_terms(alpha, da_h, da_beta)
        linear = self.b_end @ (gs.theta_inv @ w) / self.t
        return linear + corr

    def weight_basis(self, w):
        """Decompose the weight as ``M(w, v, x) = base + sum_l a_l * per_l``.

        Here ``a_l = v_l - <theta^{-1} w, A_l x>``; returns ``(base, per_l)`` with
        shapes (P,) and (P, d).
        """
        gs = self.gs
        w = as_vector(w, gs.m, name="w")
        zero = np.zeros(gs.m)
        base = self.weight(w, np.zeros(gs.d), zero)
        eye = np.eye(gs.d)
        zh = np.zeros((self.n_paths, gs.m, gs.d))
        zb = np.zeros((self.n_paths, gs.d, gs.d))
        per = np.stack(
            [self._c_terms(np.broadcast_to(eye[l], (self.n_paths, gs.d)), zh, zb)[0] for l in range(gs.d)],
            axis=1,
        )
        return base, per


class DiscretePathFunctionals:
    """Weight that is exact for the simulated chain rather than for its continuum limit.

    The time-discrete vertical component is a bilinear form in the increments,
    so summation by parts gives ``D_h Y_l = <A_l x, h_n> + <A_l theta h_n, B_n>
    + sum_j <dh_{j+1}, g_{l,j}>`` with ``g_{l,j} = G_l B_j - theta^T A_l^T dB_{j+1}``.
    The direction ``dh_{j+1} = dt (w'/t + sum_k c_k (g_{k,j} - mean_k))`` hits
    ``(w, v + <A w, B_n>)`` exactly, and its Gaussian divergence is the weight.
    ``E[f(Z_n) M] = grad E f(Z_n)`` then holds with no time-step bias.
    """

    def __init__(self, gs, grid, t):
        if grid.m != gs.m:
            raise DimensionMismatch(f"grid has m={grid.m}, group has m={gs.m}")
        check_positive(t, "t")
        g = grid.up_to(t)
        self.gs, self.t, self.grid = gs, float(t), g
        n, dt = g.n_steps, g.dt
        d = gs.d
        xi = g.increments
        b_left = g.cum[:, :-1]
        self.b_end = g.cum[:, -1]
        at = np.einsum("ba,lcb->lac", gs.theta, gs.a_mats)  # theta^T A_l^T
        self._at = at
        gseq = np.einsum("lab,pjb->pjla", gs.g_mats, b_left) - np.einsum("lab,pjb->pjla", at, xi)
        gbar = gseq.mean(axis=1)
        self.gc = gseq - gbar[:, None]
        self.dt = dt
        self.q = dt * np.einsum("pjla,pjka->plk", self.gc, self.gc)
        self.q = 0.5 * (self.q + np.swapaxes(self.q, 1, 2))
        self.sum_g = dt * gseq.sum(axis=1)
        self.skorohod = (
            np.einsum("pjka,pja->pk", gseq, xi)
            - np.einsum("pka,pa->pk", gbar, self.b_end)
            + t * (1.0 - 1.0 / n) * gs.z_drift[None, :]
        )

        trace = np.trace(self.q, axis1=1, axis2=2)
        self.eta = REG_SCALE * trace / d
        self.flagged = np.linalg.eigvalsh(self.q)[:, 0] < FLAG_FACTOR * self.eta
        self.q_inv = np.linalg.inv(self.q + self.eta[:, None, None] * np.eye(d))

        dq, dsum = [], []
        for k in range(d):
            step = dt * self.gc[:, :, k]
            nodes = np.cumsum(step, axis=1) - step
            dg = np.einsum("lab,pjb->pjla", gs.g_mats, nodes) - np.einsum("lab,pjb->pjla", at, step)
            half = dt * np.einsum("pjla,pjka->plk", dg, self.gc)
            dq.append(half + np.swapaxes(half, 1, 2))
            dsum.append(dt * dg.sum(axis=1))
        self.dq_eta = np.stack(dq, axis=1)
        self.dsum_eta = np.stack(dsum, axis=1)

    @property
    def n_paths(self):
        return self.q.shape[0]

    def alpha_tilde(self, w, v, x):
        gs = self.gs
        w_t = gs.theta_inv @ w
        const = v - np.einsum("a,lab,b->l", w_t, gs.a_mats, x)
        return const[None, :] - self.sum_g @ w_t / self.t

    def _c_terms(self, alpha, da_eta):
        qi = self.q_inv
        c = np.einsum("plk,pk->pl", qi, alpha)
        dc = np.einsum("plk,pjk->pjl", qi, da_eta - np.einsum("pjkl,pl->pjk", self.dq_eta, c))
        return np.sum(c * self.skorohod, axis=1) - np.einsum("pkk->p", dc)

    def weight(self, w, v, x):
        gs = self.gs
        w = as_vector(w, gs.m, name="w")
        v = as_vector(v, gs.d, name="v")
        x = as_vector(x, gs.m, name="x")
        w_t = gs.theta_inv @ w
        da_eta = -self.dsum_eta @ w_t / self.t
        return self.b_end @ w_t / self.t + self._c_terms(self.alpha_tilde(w, v, x), da_eta)

    def weight_basis(self, w):
        gs = self.gs
        base = self.weight(w, np.zeros(gs.d), np.zeros(gs.m))
        zero = np.zeros((self.n_paths, gs.d, gs.d))
        eye = np.eye(gs.d)
        per = np.stack(
            [self._c_terms(np.broadcast_to(eye[l], (self.n_paths, gs.d)), zero) for l in range(gs.d)], axis=1
        )
        return base, per


WEIGHT_SCHEMES = {"discrete": DiscretePathFunctionals, "continuum": PathFunctionals}


def path_functionals(gs, grid, t, scheme="discrete"):
    try:
        cls = WEIGHT_SCHEMES[scheme]
    except KeyError:
        raise InvalidParam(f"unknown weight scheme {scheme!r}; expected one of {sorted(WEIGHT_SCHEMES)}") from None
    return cls(gs, grid, t)


@dataclass(eq=False)
class BismutState:
    t: float
    w: np.ndarray
    v: np.ndarray
    q_mat: np.ndarray
    alpha_tilde: np.ndarray
    m_weight: np.ndarray
    malliavin_q: dict = field(repr=False)
    malliavin_alpha: dict = field(repr=False)
    aux_integrals: dict = field(repr=False)
    flagged: np.ndarray = field(repr=False)


def bismut_state(gs, grid, t, w, v, x):
    pf = PathFunctionals(gs, grid, t)
    w = as_vector(w, gs.m, name="w")
    v = as_vector(v, gs.d, name="v")
    x = as_vector(x, gs.m, name="x")
    da_h, da_beta = pf._dalpha_basis(w)
    dq = {f"h{i}": pf.dq_h[:, i] for i in range(gs.m)}
    dq.update({f"beta{k}": pf.dq_beta[:, k] for k in range(gs.d)})
    da = {f"h{i}": da_h[:, i] for i in range(gs.m)}
    da.update({f"beta{k}": da_beta[:, k] for k in range(gs.d)})
    aux = {"ito_g": pf.ito_g, "beta_end": pf.beta_end, "b_bar": pf.b_bar}
    return BismutState(
        t=pf.t,
        w=w,
        v=v,
        q_mat=pf.q,
        alpha_tilde=pf.alpha_tilde(w, v, x),
        m_weight=pf.weight(w, v, x),
        malliavin_q=dq,
        malliavin_alpha=da,
        aux_integrals=aux,
        flagged=pf.flagged,
    )


def compute_Q(gs, grid, t):
    """Random covariance matrices, shape (n_paths, d, d)."""
    return PathFunctionals(gs, grid, t).q


def compute_alpha_tilde(gs, grid, t, w, v, x):
    pf = PathFunctionals(gs, grid, t)
    return pf.alpha_tilde(as_vector(w, gs.m), as_vector(v, gs.d), as_vector(x, gs.m))


def malliavin_derivative(gs, grid, t, direction, target, context=None):
    """Closed-form derivative of ``Q`` or ``alpha_tilde`` along a Cameron-Martin direction.

    ``context`` is ``(w, v, x)`` and is only needed for ``target="alpha_tilde"``.
    """
    pf = PathFunctionals(gs, grid, t)
    values = direction.values if isinstance(direction, CameronMartinDirection) else direction
    values = np.asarray(values, dtype=float)
    if values.shape[-2] != pf.wts.shape[0]:
        raise GridMismatch(f"direction has {values.shape[-2]} nodes, path has {pf.wts.shape[0]}")
    if target == "Q":
        return pf.dq(values)
    if target == "alpha_tilde":
        if context is None:
            raise InvalidParam("alpha_tilde derivative needs context=(w, v, x)")
        w = as_vector(context[0], gs.m, name="w")
        return pf.dalpha(w, values)
    raise InvalidParam(f"unknown target {target!r}")


def _check_flagged(flagged, what="Q_t"):
    frac = float(np.mean(flagged))
    if frac > MAX_FLAGGED:
        raise NearSingularQ(f"{frac:.2%} of samples have near-singular {what}")
    return frac


def compute_M(gs, grid, t, w, v, x, scheme="discrete"):
    """Bismut weight per path; raises NearSingularQ if too many paths are ill-conditioned."""
    pf = path_functionals(gs, grid, t, scheme)
    _check_flagged(pf.flagged)
    return pf.weight(w, v, x)


def _direction(gs, w, v):
    return as_vector(w, gs.m, name="w"), as_vector(v, gs.d, name="v")


def _values(f, points):
    from .paths import _eval_field

    return _eval_field(f, points)


def bismut_values(
    gs, f, t, z, w, v, n_paths, seed, n_steps=None, chunk=DEFAULT_CHUNK, n_jobs=None, scheme="discrete"
):
    """Per-path ``f(X_t, Y_t) * M_t`` and the flagged mask."""
    w, v = _direction(gs, w, v)
    z = as_vector(z, gs.dim, name="z")
    n_steps = steps_for(t, n_steps)

    def run(off, size):
        grid = sample_brownian(gs.m, n_steps, t, seed, size, off)
        pf = path_functionals(gs, grid, t, scheme)
        ends = flow_endpoints(gs, z, grid)[0]
        out = np.empty((size, 2))
        out[:, 0] = _values(f, ends) * pf.weight(w, v, z[: gs.m])
        out[:, 1] = pf.flagged
        return out

    res = map_path_chunks(run, n_paths, chunk, n_jobs)
    return res[:, 0], res[:, 1].astype(bool)


def bismut_gradient(
    gs, f, t, z, w, v, n_paths, seed, n_steps=None, chunk=DEFAULT_CHUNK, n_jobs=None, scheme="discrete"
):
    """Monte Carlo ``grad_{(w,v)} P_t f(z) = E[f(X_t, Y_t) M_t]``.

    ``scheme="discrete"`` (default) is unbiased for the simulated chain;
    ``"continuum"`` is the literal six-term weight with trapezoid quadrature.
    """
    check_positive(t, "t")
    n_paths = check_positive_int(n_paths, "n_paths")
    vals, flagged = bismut_values(gs, f, t, z, w, v, n_paths, seed, n_steps, chunk, n_jobs, scheme)
    frac = _check_flagged(flagged)
    return mean_result(vals, seed, frac)


def gradient_fd_oracle(gs, f, t, z, w, v, eps, n_paths, seed, n_steps=None, chunk=DEFAULT_CHUNK, n_jobs=None):
    """Central difference of ``P_t f`` along ``(w, v)`` using the same paths on both sides."""
    check_positive(eps, "eps")
    n_paths = check_positive_int(n_paths, "n_paths")
    w, v = _direction(gs, w, v)
    z = as_vector(z, gs.dim, name="z")
    shift = eps * np.concatenate([w, v])
    n_steps = steps_for(t, n_steps)

    def run(off, size):
        grid = sample_brownian(gs.m, n_steps, t, seed, size, off)
        ends = flow_endpoints(gs, np.stack([z + shift, z - shift]), grid)
        return (_values(f, ends[0]) - _values(f, ends[1])) / (2.0 * eps)

    return mean_result(map_path_chunks(run, n_paths, chunk, n_jobs), seed)


def second_gradient(
    gs,
    f,
    t,
    z,
    dir1,
    dir2,
    n_paths,
    seed,
    n_inner=None,
    n_steps=None,
    max_work=DEFAULT_INNER_BUDGET,
    n_groups=SECOND_GRADIENT_GROUPS,
    scheme="discrete",
):
    """Nested estimator of ``grad_{dir2} grad_{dir1} P_t f(z)`` via a split at ``t/2``.

    ``n_paths`` outer paths run to ``t/2``; at each outer endpoint the inner
    quantities ``P_{t/2} f`` and its gradient are estimated from ``n_inner``
    shared inner paths (flows from other starts are left translates of the
    flow from the origin).  The standard error comes from ``n_groups``
    independent batches, each with its own inner path set.
    """
    check_positive(t, "t")
    n_paths = check_positive_int(n_paths, "n_paths")
    n_groups = check_positive_int(n_groups, "n_groups", minimum=2)
    n_inner = n_paths if n_inner is None else check_positive_int(n_inner, "n_inner")
    if n_paths * n_inner > max_work:
        raise BudgetExceeded(f"outer x inner = {n_paths * n_inner} exceeds cap {max_work}")
    w1, v1 = _direction(gs, *dir1)
    w2, v2 = _direction(gs, *dir2)
    z = as_vector(z, gs.dim, name="z")
    x0 = z[: gs.m]
    half = 0.5 * t
    n_steps = steps_for(half, n_steps)
    per_group = max(1, n_paths // n_groups)
    inner_per_group = max(1, n_inner // n_groups)
    origin = np.zeros(gs.dim)
    w1_t = gs.theta_inv @ w1
    grad_alpha = -np.einsum("a,lab,b->l", w1_t, gs.a_mats, w2)
    w2_t = gs.theta_inv @ w2

    f_start = _values(f, z[None, :])[0]
    estimates = []
    flagged = []
    for grp in range(n_groups):
        outer = sample_brownian(gs.m, n_steps, half, seed, per_group, grp * per_group)
        opf = path_functionals(gs, outer, half, scheme)
        o_ends = flow_endpoints(gs, z, outer)[0]
        m_outer = opf.weight(w1, v1, x0)
        _, per = opf.weight_basis(np.zeros(gs.m))
        # derivative of the weight along dir2: alpha_tilde shifts by grad_alpha, no linear term
        dm_outer = per @ grad_alpha
        # inner direction: (w2, v2_l + <A_l w2, B_{t/2}>)
        inner_v = v2[None, :] + np.einsum("lab,b,pa->pl", gs.a_mats, w2, outer.cum[:, -1])

        inner_offset = per_group * n_groups + grp * inner_per_group
        inner = sample_brownian(gs.m, n_steps, half, seed, inner_per_group, inner_offset)
        ipf = path_functionals(gs, inner, half, scheme)
        flagged.append(np.concatenate([opf.flagged, ipf.flagged]))
        w_ends = flow_endpoints(gs, origin, inner)[0]
        i_base, i_per = ipf.weight_basis(w2)
        pf_vals = np.empty(per_group)
        grad_vals = np.empty(per_group)
        f_outer = _values(f, o_ends)
        for j in range(per_group):
            pts = group_mul(gs, o_ends[j], w_ends)
            fv = _values(f, pts)
            coef = inner_v[j] - np.einsum("a,lab,b->l", w2_t, gs.a_mats, o_ends[j, : gs.m])
            pf_vals[j] = fv.mean()
            # the weights have mean zero, so centring f is a free control variate
            fc = fv - f_outer[j]
            grad_vals[j] = (fc * i_base).mean() + (fc[:, None] * i_per).mean(axis=0) @ coef
        estimates.append(np.mean(grad_vals * m_outer + (pf_vals - f_start) * dm_outer))
    frac = _check_flagged(np.concatenate(flagged))
    est = np.asarray(estimates)
    return EstimatorResult(
        float(est.mean()), float(est.std(ddof=1) / np.sqrt(n_groups)), per_group * n_groups, int(seed), frac
    )
