"""Named drift fields ``b(t, z)`` with values in R^m and integrability metadata.

Every drift is a :class:`DriftSpec`; call it as ``b(t, points)`` with points of
shape (n, m + d) to get (n, m).  Closed-form drifts vanish exactly outside
their support radius.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import as_points, as_vector, check_positive
from .errors import InvalidParam


def bump_profile(s):
    """Smooth compactly supported profile: exp(1 - 1/(1 - s^2)) on |s| < 1, peak 1 at 0."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1.0
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - s[inside] ** 2))
    return out


@dataclass(frozen=True, eq=False)
class DriftSpec:
    drift_id: str
    kind: str
    m: int
    d: int
    params: dict
    support_radius: float
    p: float = np.inf
    q: float = np.inf
    sup_bound: float = np.inf
    # smallest p at which the spatial L^p norm diverges (inf if never)
    divergence_p: float = np.inf
    lqp_norm_cache: float = None
    hy_half_norm_cache: float = None
    _fn: object = field(default=None, repr=False)

    @property
    def dim(self):
        return self.m + self.d

    @property
    def is_zero(self):
        return self.kind == "zero"

    @property
    def bounded(self):
        return np.isfinite(self.sup_bound)

    def __call__(self, t, z):
        pts = as_points(z, self.dim, name="z")
        if self.is_zero:
            return np.zeros((pts.shape[0], self.m))
        return np.asarray(self._fn(float(t), pts), dtype=float).reshape(pts.shape[0], self.m)

    def magnitude(self, t, z):
        return np.linalg.norm(self(t, z), axis=1)

    def scaled(self, height=1.0, width=1.0, drift_id=None):
        """``height * b(t, c + (z - c) / width)``: amplitude and support rescaled about the centre."""
        check_positive(width, "width")
        centre = np.asarray(self.params.get("center", np.zeros(self.dim)), dtype=float)
        inner = self._fn

        def fn(t, pts):
            return height * inner(t, centre + (pts - centre) / width)

        return replace(
            self,
            drift_id=drift_id or f"{self.drift_id}*h{height:g}*w{width:g}",
            params={**self.params, "height": height * self.params.get("height", 1.0), "width": width},
            support_radius=self.support_radius * width,
            sup_bound=abs(height) * self.sup_bound,
            lqp_norm_cache=None,
            hy_half_norm_cache=None,
            _fn=fn,
        )

    def with_norm_cache(self, lqp=None, hy_half=None):
        return replace(self, lqp_norm_cache=lqp, hy_half_norm_cache=hy_half)


def _unit(direction, m):
    direction = as_vector(direction, m, name="direction")
    norm = np.linalg.norm(direction)
    if norm == 0.0:
        raise InvalidParam("direction must be nonzero")
    return direction / norm


def zero_drift(m, d):
    return DriftSpec("zero", "zero", m, d, {}, 0.0, sup_bound=0.0, _fn=lambda t, z: np.zeros((z.shape[0], m)))


def constant_drift(m, d, value):
    value = as_vector(value, m, name="value")
    return DriftSpec(
        f"constant{tuple(value.tolist())}",
        "constant",
        m,
        d,
        {"value": value},
        np.inf,
        sup_bound=float(np.linalg.norm(value)),
        divergence_p=1.0,
        _fn=lambda t, z: np.broadcast_to(value, (z.shape[0], m)).copy(),
    )


def bump_drift(m, d, amplitude=1.0, radius=1.0, center=None, direction=None):
    """``amplitude * e * bump(|z - c| / r)`` with a unit horizontal direction ``e``."""
    check_positive(radius, "radius")
    center = np.zeros(m + d) if center is None else as_vector(center, m + d, name="center")
    e = _unit(np.eye(m)[0] if direction is None else direction, m)

    def fn(t, z):
        s = np.linalg.norm(z - center, axis=1) / radius
        return amplitude * bump_profile(s)[:, None] * e

    return DriftSpec(
        f"bump(a={amplitude:g},r={radius:g})",
        "bump",
        m,
        d,
        {"amplitude": amplitude, "radius": radius, "center": center, "direction": e},
        float(radius),
        sup_bound=abs(amplitude),
        _fn=fn,
    )


def radial_singular_drift(m, d, gamma, radius=1.0, center=None, direction=None):
    """``|z - c|^{-gamma} e`` truncated to the ball of radius ``r``; unbounded at ``c``."""
    check_positive(radius, "radius")
    if gamma < 0:
        raise InvalidParam("gamma must be >= 0")
    center = np.zeros(m + d) if center is None else as_vector(center, m + d, name="center")
    e = _unit(np.eye(m)[0] if direction is None else direction, m)

    def fn(t, z):
        r = np.linalg.norm(z - center, axis=1)
        with np.errstate(divide="ignore"):
            mag = np.where(r <= radius, r ** (-gamma), 0.0)
        return mag[:, None] * e

    return DriftSpec(
        f"radial(g={gamma:g},r={radius:g})",
        "radial_singular",
        m,
        d,
        {"gamma": gamma, "radius": radius, "center": center, "direction": e},
        float(radius),
        sup_bound=np.inf if gamma > 0 else 1.0,
        divergence_p=(m + d) / gamma if gamma > 0 else np.inf,
        _fn=fn,
    )


def y_oscillatory_drift(m, d, wavenumber, amplitude=1.0, radius=1.0, center=None, direction=None):
    """``sin(<k, y>)`` times a bump in the full variable ``z``."""
    k = as_vector(wavenumber, d, name="wavenumber")
    bump = bump_drift(m, d, amplitude, radius, center, direction)

    def fn(t, z):
        return np.sin(z[:, m:] @ k)[:, None] * bump._fn(t, z)

    return DriftSpec(
        f"yosc(k={tuple(k.tolist())},a={amplitude:g},r={radius:g})",
        "y_oscillatory",
        m,
        d,
        {**bump.params, "wavenumber": k},
        float(radius),
        sup_bound=abs(amplitude),
        _fn=fn,
    )


def grid_sampled_drift(lattice, times, values, drift_id="grid"):
    """Multilinear interpolation of ``values`` (n_times, *lattice.shape, m); zero off the box."""
    from scipy.interpolate import RegularGridInterpolator

    values = np.asarray(values, dtype=float)
    m = values.shape[-1]
    d = lattice.ndim - m
    times = np.asarray(times, dtype=float)
    axes = (times,) + tuple(lattice.axes)
    interp = RegularGridInterpolator(axes, values, bounds_error=False, fill_value=0.0)

    def fn(t, z):
        tt = np.clip(t, times[0], times[-1])
        return interp(np.column_stack([np.full(z.shape[0], tt), z]))

    reach = float(np.max(np.linalg.norm(np.stack([lattice.lower, lattice.upper]), axis=1)))
    return DriftSpec(
        drift_id,
        "grid_sampled",
        m,
        d,
        {"lattice": lattice.as_dict()},
        reach,
        sup_bound=float(np.max(np.linalg.norm(values, axis=-1))),
        _fn=fn,
    )


def _transition(s):
    out = np.zeros_like(s)
    pos = s > 0
    out[pos] = np.exp(-1.0 / s[pos])
    return out


def smooth_cutoff(r, radius, width=1.0):
    """Smooth step: 1 on [0, radius], 0 beyond radius + width."""
    s = (np.asarray(r, dtype=float) - radius) / width
    left, right = _transition(1.0 - s), _transition(s)
    return left / (left + right)


def with_cutoff(drift, radius, width=1.0):
    """``h_k * b`` with ``h_k = 1`` on the ball of radius ``radius``."""
    inner = drift._fn

    def fn(t, z):
        return smooth_cutoff(np.linalg.norm(z, axis=1), radius, width)[:, None] * inner(t, z)

    return replace(
        drift,
        drift_id=f"{drift.drift_id}|cut{radius:g}",
        support_radius=min(drift.support_radius, radius + width),
        _fn=fn,
    )


_BUILDERS = {
    "zero": lambda m, d, **kw: zero_drift(m, d),
    "constant": constant_drift,
    "bump": bump_drift,
    "radial_singular": radial_singular_drift,
    "y_oscillatory": y_oscillatory_drift,
}


def drift_from_config(cfg, m, d):
    """Build a drift from ``{"name": ..., **params}``."""
    cfg = dict(cfg)
    name = cfg.pop("name", None)
    if name not in _BUILDERS:
        raise InvalidParam(f"unknown drift {name!r}; expected one of {sorted(_BUILDERS)}")
    p = cfg.pop("p", None)
    q = cfg.pop("q", None)
    drift = _BUILDERS[name](m, d, **cfg)
    if p is not None or q is not None:
        drift = replace(drift, p=float(p or drift.p), q=float(q or drift.q))
    return drift
