"""Brownian driving paths and the explicit reference flow.

Randomness comes from numpy's counter-based Philox generator.  The key is
``(seed, stream)`` and the counter's high word is the index of a block of
``BLOCK_PATHS`` consecutive paths, so the increments of path ``i`` depend only
on ``(seed, i, n_steps, m)``.  Bridge refinements use their own stream per
level, which keeps coarse and refined paths coupled (common random numbers).
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from ._validation import as_vector, check_positive, check_positive_int
from .errors import DimensionMismatch, InvalidParam, NonFinite
from .estimators import DEFAULT_CHUNK, map_path_chunks, mean_result

BLOCK_PATHS = 256
STREAM_INCREMENTS = 0
STREAM_BRIDGE = 1000
DEFAULT_STEPS = 64
_MASK64 = (1 << 64) - 1


def _generator(seed, stream, block):
    key = np.array([int(seed) & _MASK64, int(stream) & _MASK64], dtype=np.uint64)
    counter = np.array([0, 0, int(block), 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def keyed_normals(seed, stream, path_offset, n_paths, per_path_shape):
    """Standard normals of shape (n_paths,) + per_path_shape for paths [offset, offset+n)."""
    first = path_offset // BLOCK_PATHS
    last = (path_offset + n_paths - 1) // BLOCK_PATHS
    parts = [
        _generator(seed, stream, b).standard_normal((BLOCK_PATHS,) + tuple(per_path_shape))
        for b in range(first, last + 1)
    ]
    block = np.concatenate(parts, axis=0)
    lo = path_offset - first * BLOCK_PATHS
    return block[lo : lo + n_paths]


def _cum_trapz(values, dt):
    out = np.zeros_like(values)
    np.cumsum(0.5 * dt * (values[:, 1:] + values[:, :-1]), axis=1, out=out[:, 1:])
    return out


@dataclass(eq=False)
class BrownianGrid:
    """A batch of discretised m-dimensional Brownian paths on a uniform grid.

    ``increments`` has shape (n_paths, n_steps, m); ``cum`` holds B at the
    n_steps + 1 nodes (``cum[:, 0] = 0``) and ``time_integral`` the running
    trapezoid of int_0^t B_s ds.
    """

    m: int
    n_steps: int
    t_final: float
    seed: int
    increments: np.ndarray
    cum: np.ndarray
    path_offset: int = 0
    level: int = 0
    time_integral: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.time_integral = _cum_trapz(self.cum, self.dt)

    @property
    def dt(self):
        return self.t_final / self.n_steps

    @property
    def n_paths(self):
        return self.cum.shape[0]

    @property
    def times(self):
        return np.linspace(0.0, self.t_final, self.n_steps + 1)

    def node_index(self, t):
        """Index of the grid node at time ``t`` (raises OffGridTime if none)."""
        from .errors import OffGridTime

        j = t / self.dt
        k = int(round(j))
        if not 0 <= k <= self.n_steps or abs(j - k) > 1e-9 * max(1.0, j):
            raise OffGridTime(f"t={t} is not a node of a grid with dt={self.dt}")
        return k

    @classmethod
    def from_cum(cls, cum, t_final, seed=0, path_offset=0, level=0):
        """Wrap given node values (n_paths, n_steps + 1, m); used for perturbed paths."""
        cum = np.asarray(cum, dtype=float)
        if cum.ndim == 2:
            cum = cum[None]
        inc = np.diff(cum, axis=1)
        return cls(cum.shape[2], cum.shape[1] - 1, float(t_final), int(seed), inc, cum, path_offset, level)

    def up_to(self, t):
        """Restriction to [0, t]; ``t`` must be a grid node."""
        k = self.node_index(t)
        return self if k == self.n_steps else self.restrict(k + 1)

    def restrict(self, n_nodes):
        """The same paths truncated to the first ``n_nodes - 1`` steps."""
        k = n_nodes - 1
        return BrownianGrid(
            m=self.m,
            n_steps=k,
            t_final=k * self.dt,
            seed=self.seed,
            increments=self.increments[:, :k],
            cum=self.cum[:, : k + 1],
            path_offset=self.path_offset,
            level=self.level,
        )


def sample_brownian(m, n_steps, t_final, seed, n_paths=1, path_offset=0):
    m = check_positive_int(m, "m")
    n_steps = check_positive_int(n_steps, "n_steps")
    n_paths = check_positive_int(n_paths, "n_paths")
    check_positive(t_final, "t_final")
    if path_offset < 0:
        raise InvalidParam("path_offset must be >= 0")
    dt = t_final / n_steps
    inc = np.sqrt(dt) * keyed_normals(seed, STREAM_INCREMENTS, path_offset, n_paths, (n_steps, m))
    cum = np.zeros((n_paths, n_steps + 1, m))
    np.cumsum(inc, axis=1, out=cum[:, 1:])
    return BrownianGrid(m, n_steps, float(t_final), int(seed), inc, cum, path_offset, 0)


def refine_brownian(grid):
    """Insert Brownian-bridge midpoints; the coarse node values are kept bit for bit."""
    n = grid.n_steps
    level = grid.level + 1
    zeta = keyed_normals(grid.seed, STREAM_BRIDGE + level, grid.path_offset, grid.n_paths, (n, grid.m))
    mid = 0.5 * (grid.cum[:, :-1] + grid.cum[:, 1:]) + np.sqrt(grid.dt / 4.0) * zeta
    cum = np.empty((grid.n_paths, 2 * n + 1, grid.m))
    cum[:, 0::2] = grid.cum
    cum[:, 1::2] = mid
    inc = np.diff(cum, axis=1)
    return BrownianGrid(grid.m, 2 * n, grid.t_final, grid.seed, inc, cum, grid.path_offset, level)


def refine_to(grid, levels):
    for _ in range(levels):
        grid = refine_brownian(grid)
    return grid


@dataclass(eq=False)
class ReferencePath:
    """Reference-flow states at every grid node, shape (n_paths, n_steps + 1, m + d)."""

    states: np.ndarray
    start: np.ndarray
    grid: BrownianGrid
    ito_cache: np.ndarray


def _ito_integrals(gs, grid):
    # int_0^t <A_l theta B_s, dB_s>, left-point rule
    a_theta = np.einsum("lab,bc->lac", gs.a_mats, gs.theta)
    inner = np.einsum("lab,pjb,pja->pjl", a_theta, grid.cum[:, :-1], grid.increments)
    out = np.zeros((grid.n_paths, grid.n_steps + 1, gs.d))
    np.cumsum(inner, axis=1, out=out[:, 1:])
    return out


def reference_flow(gs, start, grid):
    """Exact horizontal part ``X = x + theta B``; vertical part from the explicit Ito formula."""
    if grid.m != gs.m:
        raise DimensionMismatch(f"grid has m={grid.m}, group has m={gs.m}")
    start = as_vector(start, gs.dim, name="start")
    x, y = start[: gs.m], start[gs.m :]
    ito = _ito_integrals(gs, grid)
    big_x = x + grid.cum @ gs.theta.T
    ax = gs.a_mats @ x
    big_y = y + np.einsum("la,pja->pjl", ax, grid.cum) + ito
    states = np.concatenate([big_x, big_y], axis=-1)
    return ReferencePath(states, start, grid, ito)


def flow_endpoints(gs, starts, grid):
    """Terminal states for several starting points driven by the same paths.

    Returns shape (n_starts, n_paths, m + d).  Uses the same arithmetic as
    :func:`reference_flow`, so a single start reproduces its last node exactly.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    ito_end = _ito_integrals(gs, grid)[:, -1]
    b_end = grid.cum[:, -1]
    out = np.empty((starts.shape[0], grid.n_paths, gs.dim))
    for i, s in enumerate(starts):
        x, y = s[: gs.m], s[gs.m :]
        out[i, :, : gs.m] = x + b_end @ gs.theta.T
        out[i, :, gs.m :] = y + np.einsum("la,pa->pl", gs.a_mats @ x, b_end) + ito_end
    return out


def steps_for(t, n_steps=None):
    """Default mesh rule: dt = t / DEFAULT_STEPS unless overridden."""
    return DEFAULT_STEPS if n_steps is None else check_positive_int(n_steps, "n_steps")


def _eval_field(f, points):
    vals = np.asarray(f(points), dtype=float).reshape(points.shape[0])
    if not np.all(np.isfinite(vals)):
        raise NonFinite("test function returned non-finite values")
    return vals


def semigroup_values(gs, f, t, z, n_paths, seed, n_steps=None, chunk=DEFAULT_CHUNK, n_jobs=None):
    """Per-path values f(X_t, Y_t) of the reference flow started at ``z``."""
    n_steps = steps_for(t, n_steps)

    def run(off, size):
        grid = sample_brownian(gs.m, n_steps, t, seed, size, off)
        return _eval_field(f, reference_flow(gs, z, grid).states[:, -1])

    return map_path_chunks(run, n_paths, chunk, n_jobs)


def semigroup_estimate(gs, f, t, z, n_paths, seed, n_steps=None, chunk=DEFAULT_CHUNK, n_jobs=None):
    """Monte Carlo estimate of ``P_t f(z) = E f(X_t^z)`` with its standard error."""
    check_positive(t, "t")
    n_paths = check_positive_int(n_paths, "n_paths")
    vals = semigroup_values(gs, f, t, z, n_paths, seed, n_steps, chunk, n_jobs)
    return mean_result(vals, seed)


def write_path_csv(path, fh, index=0):
    """Dump one path of a :class:`ReferencePath` as CSV: step, t, B_*, X_*, Y_*."""
    grid = path.grid
    m = grid.m
    d = path.states.shape[-1] - m
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(
        ["step", "t"]
        + [f"B{i + 1}" for i in range(m)]
        + [f"X{i + 1}" for i in range(m)]
        + [f"Y{l + 1}" for l in range(d)]
    )
    for j, t in enumerate(grid.times):
        row = [j, repr(float(t))]
        row += [repr(float(v)) for v in grid.cum[index, j]]
        row += [repr(float(v)) for v in path.states[index, j]]
        writer.writerow(row)
