"""Resolvent fixed point ``u = Q_lam(grad_{sigma b} u + sigma b)`` and the map ``z + u``.

``(Q_lam f)_s(x) = int_s^T e^{-lam (t-s)} E f_t(x * W_{t-s}) dt`` where ``W``
is the reference flow from the origin.  The expectation is a Monte Carlo
average over one fixed set of Brownian paths shared by every lattice point,
evaluation time and Picard sweep, so the discrete operator is deterministic
and affine.  Offsets ``t - s`` are geometric near 0; the exponential kernel
is integrated exactly against the piecewise-linear interpolant in ``t``.
The linear term ``grad f(x) . (x * W - x)``, which has mean zero, is
subtracted from every path average as a control variate.
Fields live on a box lattice in R^{m+d}, extended by zero outside.
"""

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numba import njit
from scipy import ndimage

from ._validation import check_positive, check_positive_int
from .errors import DimensionMismatch, NoContraction, NonFinite, PathEscaped
from .group import group_mul, sigma_at
from .lattice import SpaceLattice
from .paths import reference_flow, sample_brownian

CONTRACTION_STRIKES = 3
QN3_PAIRS = 1000
STREAM_QN3 = 0x5EED


def _exp_linear_weights(lam, h):
    """Exact ``int_0^h e^{-lam r}`` against the two hat functions of [0, h]."""
    mu = lam * h
    small = mu < 1e-3
    mu_safe = np.where(small, 1.0, mu)
    e = np.exp(-mu_safe)
    left = np.where(small, 0.5 - mu / 6 + mu**2 / 24 - mu**3 / 120, (mu_safe - 1.0 + e) / mu_safe**2)
    right = np.where(small, 0.5 - mu / 3 + mu**2 / 8 - mu**3 / 30, (-np.expm1(-mu_safe) - mu_safe * e) / mu_safe**2)
    return h * left, h * right


def offset_nodes(n_span, ratio=np.sqrt(2.0)):
    """Integer offsets 0 < k <= n_span, geometric from 1 with the given ratio, plus n_span."""
    if n_span == 0:
        return np.zeros(1, dtype=int)
    ks = {0, n_span}
    k = 1.0
    while k < n_span:
        ks.add(int(round(k)))
        k *= ratio
    return np.array(sorted(ks))


@dataclass(eq=False)
class ResolventGrid:
    """Discretisation of ``Q_lam``: lattice, time grid and the shared path sample.

    ``n_fine`` steps of the path grid must be a multiple of ``n_times - 1`` so
    that every evaluation time is a path node.
    """

    lattice: SpaceLattice
    T: float = 1.0
    n_times: int = 5
    n_fine: int = 256
    n_paths: int = 128
    seed: int = 0
    ratio: float = 2.0
    control_variate: bool = True

    def __post_init__(self):
        check_positive(self.T, "T")
        check_positive_int(self.n_times, "n_times", 2)
        if self.n_fine % (self.n_times - 1):
            raise DimensionMismatch("n_fine must be a multiple of n_times - 1")

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.n_times)

    @property
    def stride(self):
        return self.n_fine // (self.n_times - 1)

    def spec(self):
        return {
            "lattice": self.lattice.as_dict(),
            "T": self.T,
            "n_times": self.n_times,
            "n_fine": self.n_fine,
            "n_paths": self.n_paths,
            "seed": self.seed,
            "ratio": self.ratio,
            "control_variate": self.control_variate,
        }

    @classmethod
    def from_spec(cls, spec):
        spec = dict(spec)
        spec["lattice"] = SpaceLattice.from_dict(spec["lattice"])
        return cls(**spec)

    def flows(self, gs):
        """Reference flow from the origin at every fine node, (n_paths, n_fine + 1, m + d)."""
        key = id(gs)
        cache = self.__dict__.setdefault("_flows", {})
        if key not in cache:
            grid = sample_brownian(gs.m, self.n_fine, self.T, self.seed, self.n_paths)
            cache[key] = (gs, reference_flow(gs, np.zeros(gs.dim), grid).states)
        return cache[key][1]


def _interp(values, coords, order=1):
    """Interpolate (n_times, *lattice, k) at fractional index coords (ndim_total, n) with zero fill."""
    k = values.shape[-1]
    out = np.empty((coords.shape[1], k))
    for c in range(k):
        out[:, c] = ndimage.map_coordinates(values[..., c], coords, order=order, mode="grid-constant", cval=0.0)
    return out


@njit(cache=True)
def _shifted_means(values, shape, lower, spacing, pts, flows, law, m):
    """Path average of the multilinear field at ``pts[i] * flows[p]`` (group product).

    ``values`` is the flattened field (n_nodes, k); nodes outside the box are zero.
    """
    n_pts, dim = pts.shape
    n_paths = flows.shape[0]
    k = values.shape[1]
    d = dim - m
    out = np.zeros((n_pts, k))
    strides = np.ones(dim, dtype=np.int64)
    for i in range(dim - 2, -1, -1):
        strides[i] = strides[i + 1] * shape[i + 1]
    moved = np.empty(dim)
    base = np.empty(dim, dtype=np.int64)
    frac = np.empty(dim)
    for i in range(n_pts):
        for p in range(n_paths):
            for a in range(m):
                moved[a] = pts[i, a] + flows[p, a]
            for l in range(d):
                corr = 0.0
                for a in range(m):
                    for b in range(m):
                        corr += law[l, a, b] * pts[i, b] * flows[p, a]
                moved[m + l] = pts[i, m + l] + flows[p, m + l] + corr
            for a in range(dim):
                c = (moved[a] - lower[a]) / spacing[a]
                fl = np.floor(c)
                base[a] = np.int64(fl)
                frac[a] = c - fl
            for corner in range(1 << dim):
                w = 1.0
                lin = 0
                for a in range(dim):
                    hi = (corner >> a) & 1
                    idx = base[a] + hi
                    if idx < 0 or idx >= shape[a]:
                        w = 0.0
                        break
                    w *= frac[a] if hi else 1.0 - frac[a]
                    lin += idx * strides[a]
                if w != 0.0:
                    for c in range(k):
                        out[i, c] += w * values[lin, c]
    return out / n_paths


def _time_slice(values, t, rgrid):
    """Linear-in-time blend of a gridded field at time ``t``."""
    pos = np.clip(t / (rgrid.T / (rgrid.n_times - 1)), 0.0, rgrid.n_times - 1)
    k = min(int(np.floor(pos)), rgrid.n_times - 2)
    a = pos - k
    if a == 0.0:
        return values[k]
    return (1.0 - a) * values[k] + a * values[k + 1]


def _lattice_coords(lattice, points):
    return ((points - lattice.lower) / lattice.spacing).T


def apply_q_lambda(gs, f, lam, rgrid):
    """``Q_lam f`` on the lattice at every grid time; returns (n_times, *shape, k).

    ``f`` is either an array (n_times, *lattice.shape, k) interpolated
    multilinearly in space-time (zero outside the box) or a callable
    ``f(t, points) -> (n, k)`` evaluated directly.
    """
    check_positive(lam, "lam", strict=False)
    lat = rgrid.lattice
    if lat.ndim != gs.dim:
        raise DimensionMismatch("lattice dimension must equal m + d")
    pts = lat.node_points()
    n_pts = pts.shape[0]
    flows = rgrid.flows(gs)
    dt = rgrid.T / rgrid.n_fine
    gridded = isinstance(f, np.ndarray)
    if gridded:
        if f.shape[:-1] != (rgrid.n_times,) + lat.shape:
            raise DimensionMismatch(f"field shape {f.shape} does not match the solver grid")
        k_out = f.shape[-1]
    else:
        k_out = np.asarray(f(0.0, pts[:1])).reshape(1, -1).shape[1]

    def evaluate(t, points):
        return np.asarray(f(t, points), dtype=float).reshape(points.shape[0], k_out)

    def gradient(t):
        """(n_pts, k, N) gradient of f_t at the lattice nodes."""
        if gridded:
            return full_gradient(_time_slice(f, t, rgrid), lat).reshape(n_pts, k_out, gs.dim)
        cols = []
        for ax, h in enumerate(1e-4 * lat.spacing):
            e = np.zeros(gs.dim)
            e[ax] = h
            cols.append((evaluate(t, pts + e) - evaluate(t, pts - e)) / (2 * h))
        return np.stack(cols, axis=-1)

    def shifted_mean(t, off):
        if gridded:
            flat = np.ascontiguousarray(_time_slice(f, t, rgrid).reshape(-1, k_out))
            shape = np.array(lat.shape, dtype=np.int64)
            mean = _shifted_means(flat, shape, lat.lower, lat.spacing, pts,
                                  np.ascontiguousarray(flows[:, off]), gs.law_mats, gs.m)
        else:
            moved = group_mul(gs, pts[:, None, :], flows[None, :, off, :])
            ev = evaluate(t, moved.reshape(-1, gs.dim))
            mean = ev.reshape(n_pts, rgrid.n_paths, k_out).mean(axis=1)
        if not rgrid.control_variate:
            return mean
        # x * W - x is linear in W and has mean zero, so its sample mean is a free control
        disp = group_mul(gs, pts, flows[:, off].mean(axis=0)) - pts
        return mean - np.einsum("pkn,pn->pk", gradient(t), disp)

    out = np.zeros((rgrid.n_times, n_pts, k_out))
    for i, s in enumerate(rgrid.times[:-1]):
        offsets = offset_nodes(rgrid.n_fine - i * rgrid.stride, rgrid.ratio)
        taus = offsets * dt
        vals = np.empty((offsets.shape[0], n_pts, k_out))
        vals[0] = _time_slice(f, s, rgrid).reshape(n_pts, k_out) if gridded else evaluate(s, pts)
        for r, off in enumerate(offsets[1:], start=1):
            vals[r] = shifted_mean(s + taus[r], off)
        h = np.diff(taus)
        wl, wr = _exp_linear_weights(lam, h)
        decay = np.exp(-lam * taus[:-1])
        weights = np.zeros(taus.shape[0])
        weights[:-1] += decay * wl
        weights[1:] += decay * wr
        out[i] = np.tensordot(weights, vals, axes=1)
    if not np.all(np.isfinite(out)):
        raise NonFinite("Q_lambda produced non-finite values")
    return out.reshape((rgrid.n_times,) + lat.shape + (k_out,))


def grad_sigma_field(gs, u, lattice):
    """``(grad_sigma u)`` of shape (..., *shape, k, m): derivative of each component along sigma(x) e_i.

    Axis derivatives are central differences (one-sided on the box faces),
    combined linearly with the direction ``sigma(x) e_i``.
    """
    nd = lattice.ndim
    lead = u.ndim - nd - 1
    axes = tuple(range(lead, lead + nd))
    grads = np.gradient(u, *lattice.spacing, axis=axes)
    jac = np.stack(grads, axis=-1)  # (..., *shape, k, N)
    x = lattice.node_points()[:, : gs.m].reshape(lattice.shape + (gs.m,))
    sig = sigma_at(gs, x)  # (*shape, N, m)
    return np.einsum("...kn,...ni->...ki", jac, sig)


def full_gradient(u, lattice):
    nd = lattice.ndim
    lead = u.ndim - nd - 1
    grads = np.gradient(u, *lattice.spacing, axis=tuple(range(lead, lead + nd)))
    return np.stack(grads, axis=-1)


def b_norm(gs, u, lattice):
    """``sup |u| + sup |grad_sigma u|`` (operator norm of the k x m block)."""
    if not np.any(u):
        return 0.0
    gsig = grad_sigma_field(gs, u, lattice)
    sup_u = float(np.max(np.linalg.norm(u, axis=-1)))
    sup_g = float(np.max(np.linalg.norm(gsig, ord=2, axis=(-2, -1))))
    return sup_u + sup_g


@dataclass(eq=False)
class MildSolutionGrid:
    lam: float
    rgrid: ResolventGrid
    u_values: np.ndarray
    grad_sigma_values: np.ndarray
    iteration_history: list
    drift_id: str = ""
    converged: bool = False

    @property
    def times(self):
        return self.rgrid.times

    @property
    def lattice(self):
        return self.rgrid.lattice

    @property
    def ratios(self):
        inc = self.iteration_history
        return [b / a if a > 0 else 0.0 for a, b in zip(inc, inc[1:])]

    @property
    def sup_norm(self):
        return float(np.max(np.linalg.norm(self.u_values, axis=-1)))

    def b_norm(self, gs):
        return b_norm(gs, self.u_values, self.lattice)

    def contraction_certificate(self, slack=0.1):
        """Later increment ratios stay within ``slack`` of the first one."""
        r = self.ratios
        return bool(r) and all(x <= r[0] + slack for x in r[1:])


def sigma_b_callable(gs, drift):
    def fn(t, points):
        return np.einsum("pni,pi->pn", sigma_at(gs, points[:, : gs.m]), drift(t, points))

    return fn


def picard_solve_xi(gs, drift, lam, rgrid, tol=1e-6, max_iter=30):
    """Iterate ``u <- Q_lam(<grad_sigma u, b> + sigma b)`` from ``u = 0``.

    ``Q_lam(sigma b)`` is computed once from the exact drift; only the
    correction ``Q_lam <grad_sigma u, b>`` goes through the lattice.  Stops
    when the B-norm increment drops below ``tol`` (absolute) and raises
    NoContraction after three consecutive increment ratios >= 1.
    """
    pts = rgrid.lattice.node_points()
    b_vals = np.stack([drift(t, pts) for t in rgrid.times]).reshape(
        (rgrid.n_times,) + rgrid.lattice.shape + (gs.m,))
    first = apply_q_lambda(gs, sigma_b_callable(gs, drift), lam, rgrid)
    u = np.zeros_like(first)
    history = []
    strikes = 0
    converged = False
    for it in range(max_iter):
        if it == 0:
            new = first.copy()
        else:
            gsig = grad_sigma_field(gs, u, rgrid.lattice)
            new = first + apply_q_lambda(gs, np.einsum("...ki,...i->...k", gsig, b_vals), lam, rgrid)
        new[-1] = 0.0
        inc = b_norm(gs, new - u, rgrid.lattice)
        u = new
        history.append(inc)
        if len(history) > 1 and history[-2] > 0 and inc / history[-2] >= 1.0:
            strikes += 1
            if strikes >= CONTRACTION_STRIKES:
                raise NoContraction(f"increment ratio >= 1 for {strikes} sweeps at lambda={lam}; raise lambda")
        else:
            strikes = 0
        if inc < tol:
            converged = True
            break
    return MildSolutionGrid(float(lam), rgrid, u, grad_sigma_field(gs, u, rgrid.lattice), history,
                            drift.drift_id, converged)


def _spatial_spline_coeffs(values):
    """Cubic-spline coefficients along the spatial axes of (n_times, *shape, k)."""
    out = np.array(values, dtype=float)
    for ax in range(1, values.ndim - 1):
        out = ndimage.spline_filter1d(out, order=3, axis=ax, mode="nearest")
    return out


@dataclass(eq=False)
class ZvonkinMap:
    """``theta_t(z) = z + u_t(z)`` with multilinear interpolation of ``u``.

    ``grad_bound`` is the largest spectral norm of the finite-difference
    Jacobian on the lattice; ``lipschitz_bound`` bounds the Lipschitz constant
    of the interpolant itself (root-sum-square of the largest forward
    differences per axis), which is what the bi-Lipschitz check relies on.
    """

    source: MildSolutionGrid
    grad_bound: float
    lipschitz_bound: float
    qn3_checked: bool = False
    qn3_passed: bool = None
    qn3_worst: float = None
    extra: dict = field(default_factory=dict)

    def _coords(self, t, points):
        rg = self.source.rgrid
        t = np.broadcast_to(np.clip(t, 0.0, rg.T), (points.shape[0],))
        tc = (t / (rg.T / (rg.n_times - 1)))[None]
        return np.vstack([tc, _lattice_coords(rg.lattice, points)])

    def u(self, t, points):
        points = np.atleast_2d(points)
        return _interp(self.source.u_values, self._coords(t, points))

    def __call__(self, t, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return points + self.u(t, points)

    @cached_property
    def _smooth(self):
        return _spatial_spline_coeffs(self.source.u_values)

    def _spline_u(self, t, points):
        rg = self.source.rgrid
        coef = self._smooth
        coords = _lattice_coords(rg.lattice, points)
        pos = np.clip(t / (rg.T / (rg.n_times - 1)), 0.0, rg.n_times - 1)
        k = min(int(np.floor(pos)), rg.n_times - 2)
        a = pos - k

        def at(slice_):
            return np.stack([ndimage.map_coordinates(slice_[..., c], coords, order=3, mode="nearest",
                                                     prefilter=False) for c in range(coef.shape[-1])], axis=-1)

        return at(coef[k]) if a == 0.0 else (1.0 - a) * at(coef[k]) + a * at(coef[k + 1])

    def u_smooth(self, t, points):
        """``u`` and its gradient (k, N) from cubic splines in space, linear in time.

        The gradient is a central difference of the spline itself with a step
        of 1e-4 lattice spacings, so it is consistent with the returned ``u``.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n, dim = points.shape
        steps = 1e-4 * self.source.lattice.spacing
        shifted = [points]
        for ax in range(dim):
            e = np.zeros(dim)
            e[ax] = steps[ax]
            shifted += [points + e, points - e]
        vals = self._spline_u(t, np.concatenate(shifted))
        u = vals[:n]
        grad = np.stack([(vals[(2 * ax + 1) * n : (2 * ax + 2) * n] - vals[(2 * ax + 2) * n : (2 * ax + 3) * n])
                         / (2 * steps[ax]) for ax in range(dim)], axis=-1)
        return u, grad


def _lipschitz_bound(u, lattice):
    per_axis = []
    nd = lattice.ndim
    for ax, h in enumerate(lattice.spacing):
        diff = np.diff(u, axis=1 + ax) / h
        per_axis.append(np.max(np.linalg.norm(diff, axis=-1)))
    return float(np.sqrt(np.sum(np.square(per_axis)))) if nd else 0.0


def check_qn3(zmap, n_pairs=QN3_PAIRS, seed=0):
    """Check ``|t(z)-t(z')|/2 <= |z-z'| <= 2|t(z)-t(z')|`` on random pairs inside the box.

    Returns (all passed, worst slack) where slack is the smallest margin of
    the two inequalities relative to ``|z - z'|``.
    """
    rg = zmap.source.rgrid
    lat = rg.lattice
    rng = np.random.Generator(np.random.Philox(key=[int(seed), STREAM_QN3]))
    a = lat.lower + rng.random((n_pairs, lat.ndim)) * (lat.upper - lat.lower)
    b = lat.lower + rng.random((n_pairs, lat.ndim)) * (lat.upper - lat.lower)
    t = rng.random(n_pairs) * rg.T
    ta, tb = zmap(t, a), zmap(t, b)
    dz = np.linalg.norm(a - b, axis=1)
    dt = np.linalg.norm(ta - tb, axis=1)
    lower = dz - 0.5 * dt
    upper = 2.0 * dt - dz
    ok = bool(np.all(lower >= 0) and np.all(upper >= 0))
    worst = float(np.min(np.minimum(lower, upper) / dz))
    return ok, worst


def build_zvonkin_map(solution, check=True, n_pairs=QN3_PAIRS, seed=0):
    u = solution.u_values
    if not np.all(np.isfinite(u)):
        raise NonFinite("u has non-finite entries")
    jac = full_gradient(u, solution.lattice)
    grad_bound = float(np.max(np.linalg.norm(jac, ord=2, axis=(-2, -1)))) if np.any(u) else 0.0
    zmap = ZvonkinMap(solution, grad_bound, _lipschitz_bound(u, solution.lattice))
    if check and grad_bound <= 0.5:
        zmap.qn3_checked = True
        zmap.qn3_passed, zmap.qn3_worst = check_qn3(zmap, n_pairs, seed)
    return zmap


def _stop_index(states, cutoff):
    """Last usable node per path: the first node at or beyond the cutoff, else the last finite node."""
    finite = ~np.isnan(states[..., 0])
    last = finite.shape[1] - 1 - np.argmax(finite[:, ::-1], axis=1)
    if cutoff is None:
        return last
    radius = np.linalg.norm(np.nan_to_num(states), axis=2)
    hit = (radius >= cutoff) & finite
    first_hit = np.where(hit.any(axis=1), np.argmax(hit, axis=1), last)
    return np.minimum(first_hit, last)


def transformed_residuals(gs, lam, zmap, sde, cutoff=None):
    """Per-path sup residual of the transformed equation and the stop index.

    Along an EM path ``Z``, ``theta(Z_t) - theta(Z_0)`` should equal
    ``int lam u ds + int sigma dB + int grad_{sigma dB} u``; all sums use the
    left-point rule and ``u`` is the cubic-spline interpolant of the solver
    field.  Residuals are taken up to each path's stop index.
    """
    grid = sde.grid
    states = sde.states
    stop = _stop_index(states, cutoff)
    n_paths, n_nodes, dim = states.shape
    if not np.any(zmap.source.u_values):
        return np.zeros(n_paths), stop
    filled = np.where(np.isnan(states), 0.0, states)
    u_vals = np.empty_like(filled)
    grads = np.empty((n_paths, n_nodes, dim, dim))
    for j, t in enumerate(grid.times):
        u_vals[:, j], grads[:, j] = zmap.u_smooth(t, filled[:, j])
    sig = sigma_at(gs, filled[:, :-1, : gs.m])
    sdb = np.einsum("pjni,pji->pjn", sig, grid.increments)
    martingale = np.einsum("pjkn,pjn->pjk", grads[:, :-1], sdb)
    step = np.diff(filled + u_vals, axis=1) - lam * u_vals[:, :-1] * grid.dt - sdb - martingale
    used = np.arange(n_nodes - 1)[None, :] < stop[:, None]
    cum = np.cumsum(np.where(used[..., None], step, 0.0), axis=1)
    return np.max(np.linalg.norm(cum, axis=2), axis=1, initial=0.0), stop


def transformed_residual(gs, drift, lam, zmap, sde, path_index=0, cutoff=None):
    """Sup residual of the transformed equation along one EM path.

    Raises PathEscaped, carrying the residual up to the exit, when the path
    reaches the cutoff radius before the final time.
    """
    one = type(sde)(sde.states[path_index : path_index + 1], _single_path_grid(sde.grid, path_index),
                    sde.stopped_at[path_index : path_index + 1], sde.stop_reason[path_index : path_index + 1],
                    0, sde.scheme_meta)
    res, stop = transformed_residuals(gs, lam, zmap, one, cutoff)
    if stop[0] < sde.grid.n_steps:
        t_stop = float(sde.grid.times[stop[0]])
        raise PathEscaped(f"path left the ball at t={t_stop:.4g}", residual=float(res[0]), stopped_at=t_stop)
    return float(res[0])


def _single_path_grid(grid, i):
    from .paths import BrownianGrid

    return BrownianGrid(grid.m, grid.n_steps, grid.t_final, grid.seed, grid.increments[i : i + 1],
                        grid.cum[i : i + 1], grid.path_offset + i, grid.level)


def save_checkpoint(solution, fh):
    """Header line (JSON) followed by the flattened ``u`` values, one per line."""
    header = {
        "lambda": solution.lam,
        "grid": solution.rgrid.spec(),
        "drift_id": solution.drift_id,
        "iterations": len(solution.iteration_history),
        "history": solution.iteration_history,
        "shape": list(solution.u_values.shape),
    }
    fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
    for v in solution.u_values.ravel():
        fh.write(repr(float(v)) + "\n")


def load_checkpoint(gs, fh):
    first = fh.readline()
    if not first.startswith("# "):
        raise ValueError("missing checkpoint header")
    header = json.loads(first[2:])
    flat = np.array([float(line) for line in fh if line.strip()])
    u = flat.reshape(header["shape"])
    rgrid = ResolventGrid.from_spec(header["grid"])
    return MildSolutionGrid(header["lambda"], rgrid, u, grad_sigma_field(gs, u, rgrid.lattice),
                            header["history"], header["drift_id"])
