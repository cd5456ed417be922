"""Euler-Maruyama simulation of the drifted equation and uniqueness harnesses.

The scheme is ``z_{j+1} = z_j + sigma(x_j) (b_j dt + dB_j)`` with the drift
frozen at the left node.  The horizontal part is carried as
``x + theta B_t + theta sum_i b_i dt`` so that a zero drift reproduces the
reference flow's ``X`` bit for bit.  Paths stop at the first node with
``|z| >= R``; later nodes are NaN.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import as_vector, check_positive, check_positive_int
from .errors import InvalidParam
from .estimators import DEFAULT_CHUNK, EstimatorResult, map_path_chunks, mean_result
from .girsanov import weak_expectation
from .paths import refine_to, sample_brownian, steps_for

MAX_CLAMP_FRACTION = 0.005
LIFETIME_NOTE = "uniqueness is certified only before the cutoff radius is reached"


@dataclass(eq=False)
class SdePath:
    """EM states (n_paths, n_steps + 1, m + d); ``stopped_at`` is NaN for paths that never stop."""

    states: np.ndarray
    grid: object
    stopped_at: np.ndarray
    stop_reason: list
    clamp_count: int
    scheme_meta: dict = field(default_factory=dict)

    @property
    def escaped(self):
        return ~np.isnan(self.stopped_at)

    @property
    def clamp_fraction(self):
        steps = self.grid.n_paths * self.grid.n_steps
        return self.clamp_count / steps if steps else 0.0


def euler_maruyama_singular(gs, drift, start, grid, cutoff=np.inf, include_z=False, clamp=True):
    """Explicit EM for every path of ``grid`` started at ``start``.

    Drift values larger than ``dt^{-1/2}`` in norm are scaled down to that
    size when ``clamp`` is set and counted.  ``include_z`` adds the constant
    vertical drift ``tr(theta A_l)``.
    """
    start = as_vector(start, gs.dim, name="start")
    if not np.linalg.norm(start) < cutoff:
        raise InvalidParam("cutoff radius must exceed |start|")
    m, n, p = gs.m, grid.n_steps, grid.n_paths
    dt = grid.dt
    cap = dt**-0.5
    x0, y0 = start[:m], start[m:]
    base_x = x0 + grid.cum @ gs.theta.T
    acc = np.zeros((p, m))
    y = np.broadcast_to(y0, (p, gs.d)).copy()
    states = np.full((p, n + 1, gs.dim), np.nan)
    states[:, 0] = start
    alive = np.ones(p, dtype=bool)
    stopped = np.full(p, np.nan)
    reasons = [""] * p
    clamps = 0
    z_step = gs.z_drift * dt if include_z else np.zeros(gs.d)
    for j, t in enumerate(grid.times[:-1]):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        x = base_x[idx, j] + acc[idx] @ gs.theta.T
        z = np.concatenate([x, y[idx]], axis=1)
        with np.errstate(all="ignore"):
            b = drift(t, z)
        bad = ~np.all(np.isfinite(b), axis=1)
        if clamp:
            size = np.linalg.norm(np.where(bad[:, None], 0.0, b), axis=1)
            over = (size > cap) | bad
            clamps += int(np.count_nonzero(over & ~bad))
            scale = np.where(size > cap, cap / np.where(size > 0, size, 1.0), 1.0)
            b = np.where(bad[:, None], 0.0, b * scale[:, None])
        elif np.any(bad):
            for i in idx[bad]:
                stopped[i], reasons[i] = t, "nonfinite drift"
            alive[idx[bad]] = False
            keep = ~bad
            idx, x, z, b = idx[keep], x[keep], z[keep], b[keep]
        acc[idx] += b * dt
        ax = np.einsum("lij,pj->pli", gs.a_mats, x)
        y[idx] += np.einsum("pli,pi->pl", ax, b * dt + grid.increments[idx, j]) + z_step
        new = np.concatenate([base_x[idx, j + 1] + acc[idx] @ gs.theta.T, y[idx]], axis=1)
        states[idx, j + 1] = new
        out = np.linalg.norm(new, axis=1) >= cutoff
        for i in idx[out]:
            stopped[i], reasons[i] = grid.times[j + 1], "left cutoff ball"
        alive[idx[out]] = False
    meta = {"dt": dt, "cutoff": float(cutoff), "drift_id": drift.drift_id, "include_z": include_z}
    return SdePath(states, grid, stopped, reasons, clamps, meta)


def em_endpoint_estimate(gs, drift, g, T, start, n_paths, seed, n_steps=None, cutoff=np.inf,
                         chunk=DEFAULT_CHUNK, n_jobs=None):
    """``E g(Z_T)`` over EM paths that never left the cutoff ball, plus the escape count."""
    n_steps = steps_for(T, n_steps)

    def run(off, size):
        grid = sample_brownian(gs.m, n_steps, T, seed, size, off)
        sde = euler_maruyama_singular(gs, drift, start, grid, cutoff)
        vals = np.full(size, np.nan)
        ok = ~sde.escaped
        if np.any(ok):
            vals[ok] = np.asarray(g(sde.states[ok, -1]), dtype=float).reshape(-1)
        return vals

    vals = map_path_chunks(run, n_paths, chunk, n_jobs)
    kept = vals[~np.isnan(vals)]
    return mean_result(kept, seed), int(vals.shape[0] - kept.shape[0])


@dataclass
class UniquenessRow:
    level: int
    dt: float
    median_sup_diff: float
    mean_sup_diff: float
    escaped: int
    clamp_fraction: float
    max_x_diff: float


@dataclass
class UniquenessReport:
    rows: list
    strong_order: float
    monotone: bool
    clamp_ok: bool
    drift_id: str
    note: str = LIFETIME_NOTE

    def as_dict(self):
        return asdict(self)


def _sup_diff(coarse, fine):
    diff = np.abs(coarse.states - fine.states[:, ::2])
    return np.nanmax(np.linalg.norm(diff, axis=2), axis=1), np.nanmax(diff[..., : coarse.grid.m], axis=(1, 2))


def empirical_order(dts, errors):
    """Least-squares slope of log error against log dt."""
    dts, errors = np.asarray(dts, float), np.asarray(errors, float)
    ok = errors > 0
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(dts[ok]), np.log(errors[ok]), 1)[0])


def pathwise_uniqueness_experiment(gs, drift, start, T, base_steps, n_levels, n_paths, seed,
                                   cutoff=np.inf, transform=None):
    """Same-noise discrepancies between the EM solutions at dt and dt/2.

    Level ``l`` compares the Brownian path refined ``l`` times against its
    next refinement.  Paths that leave the cutoff ball at either resolution
    are excluded and counted.  ``transform`` (a point map ``(t, z) -> z'``)
    reports discrepancies of the transformed processes in an extra column.
    """
    n_levels = check_positive_int(n_levels, "n_levels")
    base = sample_brownian(gs.m, base_steps, T, seed, n_paths)
    rows, extra = [], []
    coarse_grid = base
    coarse = euler_maruyama_singular(gs, drift, start, coarse_grid, cutoff)
    for level in range(n_levels):
        fine_grid = refine_to(coarse_grid, 1)
        fine = euler_maruyama_singular(gs, drift, start, fine_grid, cutoff)
        ok = ~(coarse.escaped | fine.escaped)
        sup, xdiff = _sup_diff(coarse, fine)
        sup, xdiff = sup[ok], xdiff[ok]
        rows.append(UniquenessRow(
            level, coarse_grid.dt,
            float(np.median(sup)) if sup.size else float("nan"),
            float(np.mean(sup)) if sup.size else float("nan"),
            int(np.count_nonzero(~ok)),
            max(coarse.clamp_fraction, fine.clamp_fraction),
            float(np.max(xdiff)) if xdiff.size else float("nan"),
        ))
        if transform is not None and np.any(ok):
            tc = _transformed(transform, coarse)[ok]
            tf = _transformed(transform, fine)[ok][:, ::2]
            extra.append(float(np.median(np.nanmax(np.linalg.norm(tc - tf, axis=2), axis=1))))
        coarse_grid, coarse = fine_grid, fine
    meds = [r.median_sup_diff for r in rows]
    report = UniquenessReport(
        rows,
        empirical_order([r.dt for r in rows], meds),
        bool(all(b < a for a, b in zip(meds, meds[1:]))),
        bool(all(r.clamp_fraction <= MAX_CLAMP_FRACTION for r in rows)),
        drift.drift_id,
    )
    if transform is not None:
        report.transformed_ratio = [e / r.median_sup_diff if r.median_sup_diff > 0 else float("nan")
                                    for e, r in zip(extra, rows)]
    return report


def _transformed(transform, sde):
    out = np.full_like(sde.states, np.nan)
    for j, t in enumerate(sde.grid.times):
        ok = ~np.isnan(sde.states[:, j, 0])
        if np.any(ok):
            out[ok, j] = transform(t, sde.states[ok, j])
    return out


def distinct_noise_difference(gs, drift, start, T, n_steps, n_paths, seed_a, seed_b, cutoff=np.inf):
    """Median sup-distance between EM solutions driven by two independent seeds."""
    a = euler_maruyama_singular(gs, drift, start, sample_brownian(gs.m, n_steps, T, seed_a, n_paths), cutoff)
    b = euler_maruyama_singular(gs, drift, start, sample_brownian(gs.m, n_steps, T, seed_b, n_paths), cutoff)
    ok = ~(a.escaped | b.escaped)
    sup = np.nanmax(np.linalg.norm(a.states - b.states, axis=2), axis=1)[ok]
    return float(np.median(sup))


@dataclass
class WeakStrongReport:
    weak: EstimatorResult
    strong: EstimatorResult
    zscore: float
    escaped: int
    drift_id: str
    note: str = LIFETIME_NOTE

    def as_dict(self):
        out = asdict(self)
        out["weak"] = self.weak.as_dict()
        out["strong"] = self.strong.as_dict()
        return out

    def to_json(self):
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def combined_zscore(a, b):
    diff = a.value - b.value
    se = float(np.hypot(a.stderr, b.stderr))
    if se == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return diff / se


def weak_strong_compare(gs, drift, g, T, start, n_paths, seed, n_steps=None, cutoff=np.inf,
                        chunk=DEFAULT_CHUNK, n_jobs=None):
    """Girsanov estimate (seed) against the EM estimate (seed + 1) of ``E g(Z_T)``."""
    check_positive(T, "T")
    weak = weak_expectation(gs, drift, g, T, start, n_paths, seed, n_steps, chunk=chunk, n_jobs=n_jobs)
    strong, escaped = em_endpoint_estimate(gs, drift, g, T, start, n_paths, seed + 1, n_steps, cutoff,
                                           chunk, n_jobs)
    return WeakStrongReport(weak, strong, combined_zscore(weak, strong), escaped, drift.drift_id)
