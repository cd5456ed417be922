"""Weak solutions by Girsanov reweighting of reference paths.

Under the reweighted measure the reference flow solves the drifted equation
``dZ = sigma(X) b dt + sigma(X) dB``.  Weights are evaluated with the
left-point rule on the path grid, so they are exact martingales of the
discrete chain.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import check_positive, check_positive_int
from .drifts import DriftSpec
from .errors import DegenerateWeights, InvalidParam, NonFinite, ZeroNorm
from .estimators import DEFAULT_CHUNK, EstimatorResult, map_path_chunks, mean_result
from .norms import check_KK1, lqp_norm
from .paths import reference_flow, sample_brownian, semigroup_estimate, steps_for

MIN_ESS_FRACTION = 0.01
HEAVY_TAIL_TOP = 1e-3
HEAVY_TAIL_SHARE = 0.5


def _drift_along(drift, path):
    """b_{t_j}(Z_{t_j}) at the left nodes, shape (n_paths, n_steps, m)."""
    grid = path.grid
    states = path.states
    out = np.empty((grid.n_paths, grid.n_steps, drift.m))
    for j, t in enumerate(grid.times[:-1]):
        out[:, j] = drift(t, states[:, j])
    if not np.all(np.isfinite(out)):
        raise NonFinite(f"drift {drift.drift_id} is not finite along the path")
    return out


def log_girsanov_weight(drift, path, truncation=np.inf):
    """``log R_n`` per path, stopped at the first node where ``int |b|^2 ds >= n``."""
    grid = path.grid
    if drift.is_zero:
        return np.zeros(grid.n_paths)
    b = _drift_along(drift, path)
    energy = np.sum(b**2, axis=2) * grid.dt
    # active[j] is True while the running energy before step j is below n
    running = np.cumsum(energy, axis=1) - energy
    active = running < truncation
    stoch = np.einsum("pjm,pjm->pj", b, grid.increments)
    log_r = np.sum(np.where(active, stoch - 0.5 * energy, 0.0), axis=1)
    if not np.all(np.isfinite(log_r)):
        raise NonFinite("Girsanov exponent is not finite")
    return log_r


def girsanov_weight(gs, drift, path, truncation=np.inf):
    """Exponential weight ``R_n`` for each path of a :class:`ReferencePath`.

    Returns a float when the path batch holds a single path.
    """
    if drift.m != gs.m or drift.d != gs.d:
        raise InvalidParam("drift and group dimensions disagree")
    weights = np.exp(log_girsanov_weight(drift, path, truncation))
    if not np.all(np.isfinite(weights)):
        raise NonFinite("Girsanov weight overflowed")
    return float(weights[0]) if weights.shape[0] == 1 else weights


def _scalar_field(f):
    """Normalise a test field to ``f(t, points) -> (n,)``."""
    if isinstance(f, DriftSpec):
        return f.magnitude
    return lambda t, pts: np.asarray(f(t, pts), dtype=float).reshape(pts.shape[0])


def weighted_path_values(gs, drift, T, start, n_paths, seed, per_path, n_steps=None,
                         truncation=np.inf, chunk=DEFAULT_CHUNK, n_jobs=None):
    """Columns ``[log R, per_path(path)...]`` for paths [0, n_paths), in path order."""
    n_steps = steps_for(T, n_steps)

    def run(off, size):
        grid = sample_brownian(gs.m, n_steps, T, seed, size, off)
        path = reference_flow(gs, start, grid)
        vals = np.asarray(per_path(path), dtype=float).reshape(size, -1)
        return np.column_stack([log_girsanov_weight(drift, path, truncation), vals])

    return map_path_chunks(run, n_paths, chunk, n_jobs)


def self_normalised(log_r, values, seed, check_ess=True):
    """``sum R g / sum R`` with the delta-method standard error."""
    if not np.all(np.isfinite(values)):
        raise NonFinite("observable is not finite")
    w = np.exp(log_r - np.max(log_r))
    total = np.sum(w)
    n = w.shape[0]
    ess = total**2 / np.sum(w**2)
    if check_ess and ess < MIN_ESS_FRACTION * n:
        raise DegenerateWeights(f"effective sample size {ess:.1f} is below {MIN_ESS_FRACTION:.0%} of {n}")
    value = np.sum(w * values) / total
    stderr = np.sqrt(np.sum(w**2 * (values - value) ** 2)) / total
    return EstimatorResult(float(value), float(stderr), n, int(seed))


def weak_expectation(gs, drift, g, T, start, n_paths, seed, n_steps=None,
                     truncation=np.inf, chunk=DEFAULT_CHUNK, n_jobs=None):
    """``E g(Z_T)`` for the drifted equation by self-normalised importance sampling.

    ``g`` maps points (n, m+d) to (n,).  With a zero drift this is exactly
    :func:`semigroup_estimate`.
    """
    check_positive(T, "T")
    n_paths = check_positive_int(n_paths, "n_paths")
    if drift.is_zero:
        return semigroup_estimate(gs, g, T, start, n_paths, seed, n_steps, chunk, n_jobs)

    def endpoint(path):
        return np.asarray(g(path.states[:, -1]), dtype=float).reshape(-1)

    cols = weighted_path_values(gs, drift, T, start, n_paths, seed, endpoint, n_steps, truncation, chunk, n_jobs)
    return self_normalised(cols[:, 0], cols[:, 1], seed)


def weight_moments(gs, drift, T, start, n_paths, seed, n_steps=None, truncation=np.inf,
                   chunk=DEFAULT_CHUNK, n_jobs=None):
    """Raw estimates of ``E R_n`` and of the entropy ``E R_n log R_n``."""
    cols = weighted_path_values(gs, drift, T, start, n_paths, seed, lambda p: np.zeros(p.grid.n_paths),
                                n_steps, truncation, chunk, n_jobs)
    log_r = cols[:, 0]
    r = np.exp(log_r)
    if not np.all(np.isfinite(r)):
        raise NonFinite("Girsanov weight overflowed")
    return mean_result(r, seed), mean_result(r * log_r, seed)


def occupation_integral(field, path):
    """Trapezoid ``int_0^T f_t(Z_t) dt`` per path for a scalar field."""
    grid = path.grid
    vals = np.stack([field(t, path.states[:, j]) for j, t in enumerate(grid.times)], axis=1)
    if not np.all(np.isfinite(vals)):
        raise NonFinite("occupation field is not finite along the path")
    return np.trapezoid(vals, dx=grid.dt, axis=1)


def _occupation(gs, drift, field, T, start, n_paths, seed, n_steps, chunk, n_jobs, transform=None):
    transform = transform or (lambda v: v)

    def per_path(path):
        return transform(occupation_integral(field, path))

    cols = weighted_path_values(gs, drift, T, start, n_paths, seed, per_path, n_steps, np.inf, chunk, n_jobs)
    return cols[:, 0], cols[:, 1]


def krylov_estimate(gs, drift, f, p, q, T, start, n_paths, seed, lattice, n_steps=None,
                    chunk=DEFAULT_CHUNK, n_jobs=None):
    """Ratio ``E int_0^T f_t(Z_t) dt / ||f||_{L^q_p}`` along weak-solution paths.

    ``f`` is a :class:`DriftSpec` (its magnitude is used) or a callable
    ``f(t, points) -> (n,)``; the norm is computed on ``lattice``.  An
    identically vanishing occupation integral gives 0 even when the norm is 0.
    """
    if not check_KK1(p, q, gs.m, gs.d):
        raise InvalidParam(f"(p, q) = ({p}, {q}) fails 1/q + (m+2d)/(2p) < 1")
    field = _scalar_field(f)
    log_r, occ = _occupation(gs, drift, field, T, start, n_paths, seed, n_steps, chunk, n_jobs)
    if np.any(occ < 0):
        raise InvalidParam("f must be nonnegative")
    if not np.any(occ):
        return EstimatorResult(0.0, 0.0, occ.shape[0], int(seed))
    norm = lqp_norm(f if isinstance(f, DriftSpec) else field, p, q, lattice, T)
    if norm == 0.0:
        raise ZeroNorm("f has zero L^q_p norm on the lattice but a nonzero occupation integral")
    num = self_normalised(log_r, occ, seed) if not drift.is_zero else mean_result(occ, seed)
    return EstimatorResult(num.value / norm, num.stderr / norm, num.n_samples, int(seed))


@dataclass(frozen=True)
class ExpMomentReport:
    result: EstimatorResult
    heavy_tail: bool
    top_share: float
    samplewise_max: float


def exp_moment_khasminskii(gs, drift, f, lam, T, start, n_paths, seed, n_steps=None,
                           chunk=DEFAULT_CHUNK, n_jobs=None):
    """Monte Carlo ``E exp(lam int_0^T f_t(Z_t) dt)`` with a heavy-tail indicator.

    The tail is called heavy when the largest 0.1% of weighted samples carry
    more than half of the estimate.
    """
    check_positive(lam, "lam", strict=False)
    field = _scalar_field(f)
    log_r, vals = _occupation(gs, drift, field, T, start, n_paths, seed, n_steps, chunk, n_jobs,
                              transform=lambda occ: np.exp(lam * occ))
    if not np.all(np.isfinite(vals)):
        raise NonFinite("exponential moment overflowed")
    res = mean_result(vals, seed) if drift.is_zero else self_normalised(log_r, vals, seed)
    w = np.exp(log_r - np.max(log_r))
    contrib = np.sort(w * vals)[::-1]
    k = max(1, int(np.ceil(HEAVY_TAIL_TOP * contrib.shape[0])))
    total = np.sum(contrib)
    share = float(np.sum(contrib[:k]) / total) if total > 0 else 0.0
    return ExpMomentReport(res, share > HEAVY_TAIL_SHARE, share, float(np.max(vals)))
