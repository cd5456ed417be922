"""Mixed space-time norms, the fractional Laplacian in the vertical variables and
the integrability conditions on drift exponents.

The fractional operator follows the unnormalised singular-integral definition

    -(-Delta_y)^{beta/2} f(x, y) = int_{R^d} (f(x, y + y') - f(x, y)) |y'|^{-(d+beta)} dy',

so it equals the usual (Fourier-normalised) operator divided by ``c_{d,beta}``.
"""

import json
import math
from functools import lru_cache

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import gamma as gamma_fn

from ._validation import check_positive
from .drifts import DriftSpec
from .errors import InvalidParam, NonIntegrable, UnsupportedBeta

DEFAULT_TIME_NODES = 33


def check_Hstar(p, q, m, d):
    """Strict inequality ``2/q + (m + 2d)/p < 1`` (infinite exponents allowed)."""
    check_positive(p, "p", allow_inf=True)
    check_positive(q, "q", allow_inf=True)
    return 2.0 / q + (m + 2 * d) / p < 1.0


def check_KK1(p, q, m, d):
    """Sufficient condition ``1/q + (m + 2d)/(2p) < 1`` for the first Krylov class."""
    check_positive(p, "p", allow_inf=True)
    check_positive(q, "q", allow_inf=True)
    return 1.0 / q + (m + 2 * d) / (2.0 * p) < 1.0


def _spatial_norm(values, p, volume):
    if np.isinf(p):
        return float(np.max(values)) if values.size else 0.0
    return float(np.sum(values**p) * volume) ** (1.0 / p)


def _time_norm(norms, q, times):
    norms = np.asarray(norms, dtype=float)
    if np.isinf(q):
        return float(np.max(norms))
    if norms.shape[0] == 1:
        return float(norms[0]) * float(times[-1] - times[0]) ** (1.0 / q)
    return float(np.trapezoid(norms**q, times)) ** (1.0 / q)


def _magnitudes(field, t, points):
    vals = np.asarray(field(t, points), dtype=float)
    if vals.ndim == 2:
        vals = np.linalg.norm(vals, axis=1)
    return np.abs(vals)


def lqp_norm(field, p, q, lattice, T=1.0, times=None):
    """Mixed norm ``(int_0^T ||f_t||_{L^p}^q dt)^{1/q}`` on a box lattice.

    ``field`` is a :class:`DriftSpec` (its Euclidean magnitude is used), a
    callable ``f(t, points)``, or an array of values at the cell centres with
    shape (n_times, n_cells) or (n_cells,) for a time-independent field.
    Space is integrated by the midpoint rule over the lattice cells and time by
    the trapezoid rule.  Divergence is reported as NonIntegrable.
    """
    if p < 1 or q < 1:
        raise InvalidParam("p and q must be >= 1")
    if isinstance(field, DriftSpec) and p >= field.divergence_p:
        raise NonIntegrable(f"{field.drift_id} is not in L^{p}: needs p < {field.divergence_p:g}")
    static = isinstance(field, DriftSpec) and field.kind != "grid_sampled"
    if times is None:
        times = np.array([0.0, T]) if static else np.linspace(0.0, T, DEFAULT_TIME_NODES)
    times = np.asarray(times, dtype=float)

    if isinstance(field, np.ndarray):
        vals = np.abs(np.atleast_2d(field)).reshape(np.atleast_2d(field).shape[0], -1)
        if vals.shape[0] == 1:
            times = times[[0, -1]]
        elif vals.shape[0] != times.shape[0]:
            raise InvalidParam(f"{vals.shape[0]} time slices but {times.shape[0]} time nodes")
    else:
        pts = lattice.centre_points()
        sample_times = times[:1] if static else times
        vals = np.stack([_magnitudes(field, t, pts) for t in sample_times])
    if not np.all(np.isfinite(vals)):
        raise NonIntegrable("field is not finite at some lattice cell centre")
    norms = [_spatial_norm(v, p, lattice.cell_volume) for v in vals]
    if len(norms) == 1:
        span = float(times[-1] - times[0])
        return norms[0] if np.isinf(q) else norms[0] * span ** (1.0 / q)
    return _time_norm(norms, q, times)


def radial_power_norm(gamma, radius, p, n_dims):
    """Exact ``|| |z|^{-gamma} 1_{|z| <= r} ||_{L^p(R^N)}`` (oracle for the singular drift)."""
    k = n_dims - gamma * p
    if k <= 0:
        return math.inf
    sphere = 2.0 * math.pi ** (n_dims / 2) / math.gamma(n_dims / 2)
    return (sphere * radius**k / k) ** (1.0 / p)


def fractional_constant(d, beta):
    """``c_{d,beta}`` such that the Fourier-normalised operator is ``c`` times the unnormalised one."""
    return 2.0**beta * gamma_fn((d + beta) / 2.0) / (math.pi ** (d / 2.0) * abs(gamma_fn(-beta / 2.0)))


def _gauss_cell(lo, hi, n_sub, n_gauss, d):
    """Tensor Gauss-Legendre nodes and weights on the box [lo, hi] (per-axis arrays)."""
    x, w = np.polynomial.legendre.leggauss(n_gauss)
    pts_axes, wts_axes = [], []
    for a, b in zip(lo, hi):
        edges = np.linspace(a, b, n_sub + 1)
        mid = 0.5 * (edges[1:] + edges[:-1])
        half = 0.5 * (edges[1:] - edges[:-1])
        pts_axes.append((mid[:, None] + half[:, None] * x[None, :]).ravel())
        wts_axes.append((half[:, None] * w[None, :]).ravel())
    mesh = np.meshgrid(*pts_axes, indexing="ij")
    wmesh = np.meshgrid(*wts_axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1), np.prod(np.stack([g.ravel() for g in wmesh]), axis=0)


def _face_integral(g, d):
    """``int_{S^{d-1}} g(rho) dS`` where ``rho`` is the distance from 0 to the unit cube's surface."""
    if d == 1:
        return 2.0 * g(np.array([1.0]))[0]
    x, w = np.polynomial.legendre.leggauss(48)
    mesh = np.meshgrid(*([x] * (d - 1)), indexing="ij")
    wmesh = np.meshgrid(*([w] * (d - 1)), indexing="ij")
    r = np.sqrt(1.0 + sum(m**2 for m in mesh))
    wt = np.prod(np.stack(wmesh), axis=0)
    return 2.0 * d * float(np.sum(wt * g(r) / r**d))


@lru_cache(maxsize=64)
def _unit_weights(d, beta, reach, near=2):
    """Corrected kernel weights at unit spacing for offsets |k|_inf <= reach.

    Product integration: on each cell the symmetrised integrand is expanded to
    second order about the cell centre, with derivatives taken as lattice
    differences.  Summation by parts turns the first and second moments of the
    kernel over each cell into weight corrections; the centre cell uses the
    Taylor term ``(1/2d) Delta F(0) int |u|^{2-d-beta}``.  Returns the weights
    (zero at the centre) and the kernel mass outside the window.
    """
    if d > 3:
        raise UnsupportedBeta("quadrature route supports d <= 3; use route='spectral'")
    p = d + beta
    idx = np.arange(-reach, reach + 1)
    mesh = np.meshgrid(*([idx] * d), indexing="ij")
    offs = np.stack([g.ravel() for g in mesh], axis=1).astype(float)
    cheb = np.max(np.abs(offs), axis=1)
    mass = np.zeros(offs.shape[0])
    mom1 = np.zeros((offs.shape[0], d))
    mom2 = np.zeros((offs.shape[0], d))

    far = np.flatnonzero(cheb > near)
    gp, gw = _gauss_cell(-0.5 * np.ones(d), 0.5 * np.ones(d), 1, 4, d)
    for start in range(0, far.size, 100_000):
        sel = far[start : start + 100_000]
        kern = np.linalg.norm(offs[sel][:, None, :] + gp[None], axis=2) ** (-p) * gw
        mass[sel] = kern.sum(axis=1)
        mom1[sel] = kern @ gp
        mom2[sel] = kern @ gp**2
    for i in np.flatnonzero((cheb <= near) & (cheb > 0)):
        pts, wts = _gauss_cell(offs[i] - 0.5, offs[i] + 0.5, 8, 8, d)
        kern = wts * np.sum(pts**2, axis=1) ** (-p / 2)
        rel = pts - offs[i]
        mass[i] = kern.sum()
        mom1[i] = kern @ rel
        mom2[i] = kern @ rel**2

    shape = (2 * reach + 1,) * d
    weights = mass.reshape(shape).copy()
    for ax in range(d):
        m1 = mom1[:, ax].reshape(shape)
        m2 = mom2[:, ax].reshape(shape)
        weights += 0.5 * (_shift(m1, ax, 1) - _shift(m1, ax, -1))
        weights += 0.5 * (_shift(m2, ax, 1) + _shift(m2, ax, -1) - 2.0 * m2)
    centre = tuple([reach] * d)
    centre_taylor = _face_integral(lambda rho: (0.5 * rho) ** (2.0 - beta) / (2.0 - beta), d) / (2.0 * d)
    for ax in range(d):
        for sign in (-1, 1):
            pos = list(centre)
            pos[ax] += sign
            weights[tuple(pos)] += centre_taylor
    weights[centre] = 0.0
    tail = _face_integral(lambda rho: ((reach + 0.5) * rho) ** (-beta) / beta, d)
    return weights, tail


def _shift(arr, axis, step):
    """``out[k] = arr[k - step]`` along ``axis`` with zero fill."""
    out = np.zeros_like(arr)
    n = arr.shape[axis]
    src = [slice(None)] * arr.ndim
    dst = [slice(None)] * arr.ndim
    if step > 0:
        src[axis], dst[axis] = slice(0, n - step), slice(step, n)
    else:
        src[axis], dst[axis] = slice(-step, n), slice(0, n + step)
    out[tuple(dst)] = arr[tuple(src)]
    return out


def frac_laplacian_y(values, spacing_y, beta, route="quadrature", extension="zero", normalized=False, pad=16):
    """Apply ``-(-Delta_y)^{beta/2}`` along the trailing ``len(spacing_y)`` axes of ``values``.

    ``extension="zero"`` treats the field as 0 outside the box (decaying
    data); ``"periodic"`` wraps it.  ``route="quadrature"`` evaluates the
    singular integral with exact cell weights and a second-order Taylor
    correction for the cells around ``y' = 0``; ``route="spectral"`` multiplies
    by the Fourier symbol.  The y-spacing must be uniform and equal on all
    vertical axes.
    """
    if not 0.0 < beta < 2.0:
        raise UnsupportedBeta(f"beta must lie in (0, 2), got {beta}")
    if extension not in ("zero", "periodic"):
        raise InvalidParam(f"unknown extension {extension!r}")
    values = np.asarray(values, dtype=float)
    spacing_y = np.atleast_1d(np.asarray(spacing_y, dtype=float))
    d = spacing_y.shape[0]
    if not np.allclose(spacing_y, spacing_y[0], rtol=1e-12):
        raise InvalidParam("vertical spacing must be equal on all axes")
    h = float(spacing_y[0])
    axes = tuple(range(values.ndim - d, values.ndim))
    periodic = extension == "periodic"

    if route == "spectral":
        out = _spectral(values, axes, h, beta, periodic, pad)
    elif route == "quadrature":
        out = _quadrature(values, axes, h, beta, periodic)
    else:
        raise InvalidParam(f"unknown route {route!r}")
    return out * fractional_constant(d, beta) if normalized else out


def _spectral(values, axes, h, beta, periodic, pad):
    d = len(axes)
    shape = [values.shape[a] for a in axes]
    full = shape if periodic else [pad * n for n in shape]
    spec = np.fft.rfftn(values, s=full, axes=axes)
    freqs = [2 * np.pi * np.fft.fftfreq(n, d=h) for n in full[:-1]]
    freqs.append(2 * np.pi * np.fft.rfftfreq(full[-1], d=h))
    mesh = np.meshgrid(*freqs, indexing="ij")
    symbol = np.sqrt(sum(k**2 for k in mesh)) ** beta / fractional_constant(d, beta)
    out = np.fft.irfftn(-symbol * spec, s=full, axes=axes)
    sl = [slice(None)] * values.ndim
    for a, n in zip(axes, shape):
        sl[a] = slice(0, n)
    return out[tuple(sl)]


def _quadrature(values, axes, h, beta, periodic):
    d = len(axes)
    shape = [values.shape[a] for a in axes]
    reach = (2 * max(shape)) if periodic else (max(shape) - 1)
    weights, tail = _unit_weights(d, float(beta), int(reach))
    scale = h ** (-beta)
    kernel_shape = (1,) * (values.ndim - d) + weights.shape
    if periodic:
        folded = np.zeros(shape)
        idx = np.arange(-reach, reach + 1)
        for pos in np.ndindex(*weights.shape):
            key = tuple(int(idx[p]) % n for p, n in zip(pos, shape))
            folded[key] += weights[pos]
        spec = np.fft.rfftn(values, axes=axes) * np.fft.rfftn(folded, s=shape, axes=tuple(range(d)))
        conv = np.fft.irfftn(spec, s=shape, axes=axes)
        mean = values.mean(axis=axes, keepdims=True)
        out = conv - values * weights.sum() + tail * (mean - values)
    else:
        conv = fftconvolve(values, weights.reshape(kernel_shape), mode="same", axes=axes)
        out = conv - values * (weights.sum() + tail)
    return scale * out


def hy_norm(field, beta, p, q, lattice, m, T=1.0, times=None, extension="zero", route="quadrature"):
    """``||f||_{L^q_p} + ||(-Delta_y)^{beta/2} f||_{L^q_p}`` on the cell centres of ``lattice``.

    ``beta = 0`` returns ``2 * ||f||_{L^q_p}`` (the fractional power is the identity).
    """
    if beta < 0 or beta >= 2:
        raise UnsupportedBeta(f"beta must lie in [0, 2), got {beta}")
    base = lqp_norm(field, p, q, lattice, T=T, times=times)
    if beta == 0:
        return 2.0 * base
    static = isinstance(field, DriftSpec) and field.kind != "grid_sampled"
    if times is None:
        times = np.array([0.0, T]) if static else np.linspace(0.0, T, DEFAULT_TIME_NODES)
    times = np.asarray(times, dtype=float)
    cell_shape = tuple(n - 1 for n in lattice.shape)
    pts = lattice.centre_points()
    sample_times = times[:1] if static else times
    frac_vals = []
    for t in sample_times:
        raw = np.asarray(field(t, pts), dtype=float)
        raw = raw.reshape(cell_shape + (-1,)) if raw.ndim == 2 else raw.reshape(cell_shape + (1,))
        comp = np.moveaxis(raw, -1, 0)
        lap = frac_laplacian_y(comp, lattice.spacing[m:], beta, route=route, extension=extension)
        frac_vals.append(np.linalg.norm(lap.reshape(lap.shape[0], -1), axis=0))
    frac = np.stack(frac_vals)
    if static:
        frac_norm = lqp_norm(frac[0], p, q, lattice, T=T, times=np.array([0.0, T]))
    else:
        frac_norm = lqp_norm(frac, p, q, lattice, T=T, times=times)
    return base + frac_norm


def norm_record(drift_id, p, q, beta, value, lattice):
    """JSON-ready record ``{drift_id, p, q, beta, value, lattice}``."""

    def num(x):
        return None if x is None else ("inf" if np.isinf(x) else float(x))

    return {
        "drift_id": drift_id,
        "p": num(p),
        "q": num(q),
        "beta": num(beta),
        "value": num(value),
        "lattice": lattice.as_dict(),
    }


def dump_norm_records(records, fh):
    json.dump(records, fh, indent=2, sort_keys=True)
    fh.write("\n")
