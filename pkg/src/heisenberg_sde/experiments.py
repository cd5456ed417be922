"""Named experiments: each binds the library to a config and returns tables, documents and checks.

``run_experiment`` builds the group and drift, dispatches on the experiment
name, writes the report files plus a manifest and returns the overall
status.  A check is a named boolean computed against thresholds taken from
the config.
"""

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import as_vector, check_positive_int
from .bismut import bismut_gradient, gradient_fd_oracle
from .drifts import bump_drift, drift_from_config
from .errors import ConfigInvalid, HeisenbergSDEError, InsufficientSamples, InvalidParam
from .estimators import DEFAULT_CHUNK, map_path_chunks
from .girsanov import krylov_estimate
from .group import check_hypothesis_H, group_from_config, group_inv, group_mul, sigma_at
from .lattice import SpaceLattice
from .norms import check_Hstar, check_KK1, lqp_norm, norm_record
from .paths import reference_flow, refine_to, sample_brownian, steps_for
from .reports import csv_text, json_text, write_manifest
from .singular import (
    LIFETIME_NOTE,
    distinct_noise_difference,
    euler_maruyama_singular,
    pathwise_uniqueness_experiment,
    weak_strong_compare,
)
from .zvonkin import (
    ResolventGrid,
    build_zvonkin_map,
    picard_solve_xi,
    save_checkpoint,
    transformed_residuals,
)

Z_95 = 1.959963984540054

# test observables g(x, y) with x the first m coordinates and y the rest
OBSERVABLES = {
    "gauss": lambda x, y: np.exp(-0.5 * (np.sum(x**2, 1) + np.sum(y**2, 1))),
    "cos_x": lambda x, y: np.cos(x[:, 0] + 0.5 * x[:, 1]),
    "tanh_y": lambda x, y: np.tanh(y[:, 0]),
    "sin_x_gauss_y": lambda x, y: np.sin(x[:, 0]) * np.exp(-y[:, 0] ** 2),
    "atan_sum": lambda x, y: np.arctan(x[:, 0] + x[:, 1] + y[:, 0]),
    "one": lambda x, y: np.ones(x.shape[0]),
    "sign_x1": lambda x, y: np.sign(x[:, 0]),
    "sign_y1": lambda x, y: np.sign(y[:, 0]),
}


def observable(name, m):
    """Observable on points (n, m + d) from the named (x, y) function."""
    try:
        g = OBSERVABLES[name]
    except KeyError:
        raise InvalidParam(f"unknown observable {name!r}; expected one of {sorted(OBSERVABLES)}") from None
    return lambda z: g(z[:, :m], z[:, m:])


# ---------------------------------------------------------------- fitting


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    stderr: float
    intercept: float

    @property
    def ci(self):
        return (self.slope - Z_95 * self.stderr, self.slope + Z_95 * self.stderr)

    @property
    def ci_width(self):
        return 2 * Z_95 * self.stderr

    def as_dict(self):
        return {"slope": self.slope, "stderr": self.stderr, "intercept": self.intercept,
                "ci_low": self.ci[0], "ci_high": self.ci[1]}


def fit_log_slope(ts, values, stderrs):
    """Weighted least squares of log value on log t with Monte Carlo weights."""
    ts, values, stderrs = (np.asarray(a, dtype=float) for a in (ts, values, stderrs))
    if np.any(values <= 0):
        raise InsufficientSamples("nonpositive estimate; cannot take logs")
    x, y = np.log(ts), np.log(values)
    sig = np.maximum(stderrs / values, 1e-300)
    w = 1.0 / sig**2
    xm = np.sum(w * x) / np.sum(w)
    ym = np.sum(w * y) / np.sum(w)
    sxx = np.sum(w * (x - xm) ** 2)
    slope = np.sum(w * (x - xm) * (y - ym)) / sxx
    return SlopeFit(float(slope), float(np.sqrt(1.0 / sxx)), float(ym - slope * xm))


def _check_geometric(t_set, minimum=4):
    ts = np.asarray(t_set, dtype=float)
    if ts.ndim != 1 or ts.size < minimum or np.any(ts <= 0):
        raise InvalidParam(f"need at least {minimum} positive times")
    ratios = ts[1:] / ts[:-1]
    if not np.allclose(ratios, ratios[0], rtol=1e-9) or ratios[0] == 1.0:
        raise InvalidParam("time set must be geometric")
    return ts


# ---------------------------------------------------------------- heat kernel


def bandwidths(samples, rule="scott"):
    n, dim = samples.shape
    factor = n ** (-1.0 / (dim + 4))
    if rule == "silverman":
        factor *= (4.0 / (dim + 2)) ** (1.0 / (dim + 4))
    elif rule != "scott":
        raise InvalidParam(f"unknown bandwidth rule {rule!r}")
    return np.std(samples, axis=0, ddof=1) * factor


def kde_at(samples, point, h):
    """Product-Gaussian kernel density at one point, with its standard error."""
    u = (samples - point) / h
    k = np.exp(-0.5 * np.sum(u * u, axis=1)) / np.prod(h * np.sqrt(2 * np.pi))
    n = k.shape[0]
    return float(np.mean(k)), float(np.std(k, ddof=1) / np.sqrt(n))


@dataclass
class HeatKernelReport:
    rows: list
    fit: SlopeFit
    horizontal_fit: SlopeFit
    sensitivity: dict
    rule: str

    def as_dict(self):
        return {"fit": self.fit.as_dict(), "horizontal_fit": self.horizontal_fit.as_dict(),
                "sensitivity": {k: v.as_dict() for k, v in self.sensitivity.items()}, "rule": self.rule}


HEAT_HEADER = ["t", "density", "stderr", "density_half_bw", "density_double_bw",
               "horizontal_density", "horizontal_stderr", "n_paths"]


def heat_kernel_exponent(gs, start, t_set, n_paths, seed, bandwidth="scott", n_steps=None,
                         chunk=DEFAULT_CHUNK, n_jobs=None):
    """Log-log slope of the KDE transition density at the start point over ``t_set``.

    The horizontal control uses the density of ``X_t`` alone.  Each time uses
    its own seed (``seed + index``) so the fitted points are independent.
    """
    ts = _check_geometric(t_set)
    n_paths = check_positive_int(n_paths, "n_paths")
    if n_paths < 100:
        raise InsufficientSamples("kernel density needs at least 100 paths")
    start = as_vector(start, gs.dim, name="start")
    n_steps = steps_for(None, n_steps)
    rows = []
    cols = {"full": [], "half": [], "double": [], "horiz": []}
    for k, t in enumerate(ts):
        def run(off, size, t=t, k=k):
            grid = sample_brownian(gs.m, n_steps, t, seed + k, size, off)
            return reference_flow(gs, start, grid).states[:, -1]

        ends = map_path_chunks(run, n_paths, chunk, n_jobs)
        h = bandwidths(ends, bandwidth)
        full = kde_at(ends, start, h)
        half = kde_at(ends, start, 0.5 * h)
        double = kde_at(ends, start, 2.0 * h)
        hx = bandwidths(ends[:, : gs.m], bandwidth)
        horiz = kde_at(ends[:, : gs.m], start[: gs.m], hx)
        if full[0] <= 0 or horiz[0] <= 0:
            raise InsufficientSamples(f"no kernel mass at the start point for t={t}")
        for key, val in zip(cols, (full, half, double, horiz)):
            cols[key].append(val)
        rows.append([t, full[0], full[1], half[0], double[0], horiz[0], horiz[1], n_paths])

    def fit(key):
        vals = np.asarray(cols[key])
        return fit_log_slope(ts, vals[:, 0], vals[:, 1])

    return HeatKernelReport(rows, fit("full"), fit("horiz"),
                            {"half_bw": fit("half"), "double_bw": fit("double")}, bandwidth)


# ---------------------------------------------------------------- gradient scaling


def sigma_direction(gs, z, i):
    """``U_i`` at ``z`` split into its (x, y) parts."""
    col = sigma_at(gs, np.asarray(z, dtype=float)[: gs.m])[:, i]
    return col[: gs.m], col[gs.m :]


@dataclass
class ScalingReport:
    kind: str
    rows: list
    fit: SlopeFit

    def as_dict(self):
        return {"kind": self.kind, "fit": self.fit.as_dict()}


SCALING_HEADER = ["kind", "t", "gradient", "stderr", "n_paths", "flagged_fraction"]


def gradient_scaling(gs, f, t_set, kind, n_paths, seed, z=None, n_steps=None, index=0,
                     chunk=DEFAULT_CHUNK, n_jobs=None):
    """Slope of ``log |grad P_t f(z)|`` against ``log t``.

    ``kind="sigma"`` differentiates along ``U_index``; ``kind="y"`` along the
    vertical unit vector ``e_index``.  Each time uses seed ``seed + k``.
    """
    ts = _check_geometric(t_set)
    z = np.zeros(gs.dim) if z is None else as_vector(z, gs.dim, name="z")
    if kind == "sigma":
        w, v = sigma_direction(gs, z, index)
    elif kind == "y":
        w, v = np.zeros(gs.m), np.eye(gs.d)[index]
    else:
        raise InvalidParam(f"kind must be 'sigma' or 'y', got {kind!r}")
    rows, vals, errs = [], [], []
    for k, t in enumerate(ts):
        res = bismut_gradient(gs, f, t, z, w, v, n_paths, seed + k, n_steps, chunk, n_jobs)
        rows.append([kind, t, res.value, res.stderr, res.n_samples, res.flagged_fraction])
        vals.append(abs(res.value))
        errs.append(res.stderr)
    return ScalingReport(kind, rows, fit_log_slope(ts, vals, errs))


# ---------------------------------------------------------------- Bismut vs finite differences

GRADIENT_HEADER = ["function", "point", "t", "direction_id", "bismut_mean", "bismut_stderr",
                   "fd_mean", "fd_stderr", "n_paths", "flagged_fraction"]


def bismut_vs_fd(gs, t, functions, directions, base_points, n_paths, seed, fd_eps, n_steps=None,
                 chunk=DEFAULT_CHUNK, n_jobs=None):
    """Rows of Bismut (seed) and central-difference (seed + 1) gradients for every case."""
    rows = []
    for name in functions:
        f = observable(name, gs.m)
        for pi, point in enumerate(base_points):
            z = as_vector(point, gs.dim, name="base point")
            for di, direction in enumerate(directions):
                vec = as_vector(direction, gs.dim, name="direction")
                w, v = vec[: gs.m], vec[gs.m :]
                bis = bismut_gradient(gs, f, t, z, w, v, n_paths, seed, n_steps, chunk, n_jobs)
                fd = gradient_fd_oracle(gs, f, t, z, w, v, fd_eps, n_paths, seed + 1, n_steps, chunk, n_jobs)
                rows.append([name, f"p{pi}", t, f"d{di}", bis.value, bis.stderr, fd.value, fd.stderr,
                             n_paths, bis.flagged_fraction])
    return rows


def gradient_zscores(rows):
    out = []
    for r in rows:
        se = float(np.hypot(r[5], r[7]))
        diff = r[4] - r[6]
        out.append(0.0 if diff == 0 else (abs(diff) / se if se > 0 else np.inf))
    return np.asarray(out)


# ---------------------------------------------------------------- Zvonkin sweep

SWEEP_HEADER = ["lambda", "sup_norm", "b_norm", "grad_bound", "first_ratio", "max_ratio", "iterations",
                "converged", "contraction_certificate", "qn3_checked", "qn3_passed", "qn3_worst"]
INCREMENT_HEADER = ["lambda", "iteration", "increment", "ratio"]
RESIDUAL_HEADER = ["n_steps", "dt", "mean_sup_residual", "median_sup_residual", "ratio", "stopped"]


def _cube(spec, dim):
    centre = spec.get("center")
    return SpaceLattice.cube(float(spec["half_width"]), int(spec["nodes"]), dim, centre)


def _resolvent_grid(spec, dim, seed):
    return ResolventGrid(
        _cube(spec["lattice"], dim),
        T=float(spec.get("T_grid", 1.0)),
        n_times=int(spec.get("n_times", 5)),
        n_fine=int(spec.get("n_fine", 256)),
        n_paths=int(spec.get("grid_paths", 128)),
        seed=seed,
        ratio=float(spec.get("ratio", 2.0)),
    )


def residual_levels(gs, drift, lam, zmap, T, base_steps, n_levels, n_paths, seed, cutoff=None):
    """Mean and median sup residual of the transformed equation per mesh level."""
    base = sample_brownian(gs.m, base_steps, T, seed, n_paths)
    rows = []
    prev = None
    for level in range(n_levels):
        grid = refine_to(base, level)
        sde = euler_maruyama_singular(gs, drift, np.zeros(gs.dim), grid,
                                      cutoff=np.inf if cutoff is None else cutoff)
        res, stop = transformed_residuals(gs, lam, zmap, sde, cutoff)
        ok = stop == grid.n_steps
        if not np.any(ok):
            raise InsufficientSamples("every path left the cutoff ball")
        mean = float(np.mean(res[ok]))
        rows.append([grid.n_steps, grid.dt, mean, float(np.median(res[ok])),
                     prev / mean if prev else float("nan"), int(np.count_nonzero(~ok))])
        prev = mean
    return rows


def zvonkin_sweep(gs, drift, params, seed):
    lattice_spec = {k: params[k] for k in ("lattice", "n_times", "n_fine", "grid_paths", "T_grid", "ratio")
                    if k in params}
    rgrid = _resolvent_grid(lattice_spec, gs.dim, seed)
    tol = float(params.get("tol", 1e-6))
    max_iter = int(params.get("max_iter", 30))
    pairs = int(params.get("qn3_pairs", 1000))
    sweep, increments, checkpoints = [], [], {}
    for lam in params["lambdas"]:
        sol = picard_solve_xi(gs, drift, float(lam), rgrid, tol, max_iter)
        zmap = build_zvonkin_map(sol, n_pairs=pairs, seed=seed)
        r = sol.ratios
        sweep.append([float(lam), sol.sup_norm, sol.b_norm(gs), zmap.grad_bound, r[0] if r else 0.0,
                      max(r) if r else 0.0, len(sol.iteration_history), sol.converged,
                      sol.contraction_certificate(), zmap.qn3_checked, bool(zmap.qn3_passed),
                      float("nan") if zmap.qn3_worst is None else zmap.qn3_worst])
        for i, inc in enumerate(sol.iteration_history):
            increments.append([float(lam), i, inc, r[i - 1] if i else float("nan")])
        buf = _TextSink()
        save_checkpoint(sol, buf)
        checkpoints[f"checkpoint_lambda{lam:g}.txt"] = buf.text
    res_spec = params["residual"]
    res_grid = _resolvent_grid(res_spec, gs.dim, seed)
    lam = float(res_spec["lambda"])
    sol = picard_solve_xi(gs, drift, lam, res_grid, tol, max_iter)
    zmap = build_zvonkin_map(sol, check=False)
    residual = residual_levels(gs, drift, lam, zmap, float(res_spec.get("T", 0.5)),
                               int(res_spec.get("base_steps", 8)), int(res_spec.get("n_levels", 4)),
                               int(res_spec.get("n_paths", 2000)), seed + 1, res_spec.get("cutoff"))
    return sweep, increments, residual, checkpoints


class _TextSink:
    def __init__(self):
        self.parts = []

    def write(self, s):
        self.parts.append(s)

    @property
    def text(self):
        return "".join(self.parts)


# ---------------------------------------------------------------- Krylov suite

KRYLOV_HEADER = ["f_id", "height", "width", "occupation", "occupation_stderr", "norm", "ratio"]


def krylov_suite(gs, drift, f_base, p, q, T, heights, widths, lattice, start, n_paths, seed, n_steps=None,
                 chunk=DEFAULT_CHUNK, n_jobs=None):
    """Krylov ratios over a rescaled family of ``f_base``; returns rows and norm records."""
    rows, records = [], []
    for h in heights:
        for w in widths:
            f = f_base.scaled(height=float(h), width=float(w))
            res = krylov_estimate(gs, drift, f, p, q, T, start, n_paths, seed, lattice, n_steps, chunk, n_jobs)
            norm = lqp_norm(f, p, q, lattice, T)
            records.append(norm_record(f.drift_id, p, q, None, norm, lattice))
            rows.append([f.drift_id, float(h), float(w), res.value * norm, res.stderr * norm, norm, res.value])
    return rows, records


# ---------------------------------------------------------------- group checks


def group_axiom_errors(gs, n_triples, seed):
    """Largest relative errors of associativity, identity and inverse on random triples."""
    rng = np.random.Generator(np.random.Philox(key=[int(seed), 0xA55]))
    a, b, c = (rng.standard_normal((n_triples, gs.dim)) for _ in range(3))
    e = np.zeros_like(a)

    def rel(u, v):
        scale = np.maximum(1.0, np.maximum(np.linalg.norm(u, axis=1), np.linalg.norm(v, axis=1)))
        return float(np.max(np.linalg.norm(u - v, axis=1) / scale))

    left = group_mul(gs, group_mul(gs, a, b), c)
    right = group_mul(gs, a, group_mul(gs, b, c))
    inv = group_inv(gs, a)
    return {
        "associativity": rel(left, right),
        "left_identity": rel(group_mul(gs, e, a), a),
        "right_identity": rel(group_mul(gs, a, e), a),
        "left_inverse": rel(group_mul(gs, inv, a), e),
        "right_inverse": rel(group_mul(gs, a, inv), e),
    }


HSTAR_HEADER = ["p", "q", "m", "d", "lhs", "passes"]


def hstar_table(cases, m, d):
    rows = []
    for p, q in cases:
        p, q = float(p), float(q)
        lhs = 2.0 / q + (m + 2 * d) / p
        rows.append([p, q, m, d, lhs, check_Hstar(p, q, m, d)])
    return rows


# ---------------------------------------------------------------- runner


@dataclass
class RunResult:
    status: int
    checks: dict
    files: list
    summary: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.status == 0


class StageError(HeisenbergSDEError, RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"stage {stage!r} failed: {type(exc).__name__}: {exc}")
        self.stage = stage
        self.cause = exc


def _budget(cfg):
    b = cfg["budget"]
    return int(b["n_paths"]), b.get("n_steps")


def _start(params, gs):
    return as_vector(params.get("start", np.zeros(gs.dim)), gs.dim, name="start")


def _thr(cfg, key):
    return cfg["thresholds"][key]


def _heat(cfg, gs, drift):
    p = cfg["params"]
    n_paths, n_steps = _budget(cfg)
    rep = heat_kernel_exponent(gs, _start(p, gs), p["t_set"], n_paths, cfg["seed"],
                               p.get("bandwidth", "scott"), n_steps)
    checks = {
        "slope": abs(rep.fit.slope - _thr(cfg, "slope_target")) <= _thr(cfg, "slope_tol"),
        "horizontal_slope": abs(rep.horizontal_fit.slope - _thr(cfg, "horizontal_target"))
        <= _thr(cfg, "horizontal_tol"),
    }
    return {"heat_kernel.csv": (HEAT_HEADER, rep.rows)}, {"heat_kernel.json": rep.as_dict()}, {}, checks, {
        "slope": rep.fit.slope, "horizontal_slope": rep.horizontal_fit.slope}


def _bismut(cfg, gs, drift):
    p = cfg["params"]
    n_paths, n_steps = _budget(cfg)
    rows = bismut_vs_fd(gs, float(p["t"]), p["functions"], p["directions"], p["base_points"], n_paths,
                        cfg["seed"], float(p["fd_eps"]), n_steps)
    z = gradient_zscores(rows)
    passing = int(np.count_nonzero(z <= _thr(cfg, "max_abs_z")))
    doc = {"cases": len(rows), "passing": passing, "max_abs_z": float(np.max(z)),
           "zscores": z.tolist()}
    checks = {"agreement": passing >= _thr(cfg, "min_passing")}
    return {"gradients.csv": (GRADIENT_HEADER, rows)}, {"gradients.json": doc}, {}, checks, {
        "passing": passing, "cases": len(rows)}


def _scaling(cfg, gs, drift):
    p = cfg["params"]
    n_paths, n_steps = _budget(cfg)
    sig = gradient_scaling(gs, observable(p.get("sigma_function", "sign_x1"), gs.m), p["t_set"], "sigma",
                           n_paths, cfg["seed"], n_steps=n_steps)
    yy = gradient_scaling(gs, observable(p.get("y_function", "sign_y1"), gs.m), p["t_set"], "y",
                          n_paths, cfg["seed"] + 1000, n_steps=n_steps)
    checks = {
        "sigma_slope": abs(sig.fit.slope - _thr(cfg, "sigma_target")) <= _thr(cfg, "sigma_tol"),
        "y_slope": abs(yy.fit.slope - _thr(cfg, "y_target")) <= _thr(cfg, "y_tol"),
    }
    doc = {"sigma": sig.as_dict(), "y": yy.as_dict()}
    return {"gradient_scaling.csv": (SCALING_HEADER, sig.rows + yy.rows)}, {"gradient_scaling.json": doc}, {}, \
        checks, {"sigma_slope": sig.fit.slope, "y_slope": yy.fit.slope}


def _zvonkin(cfg, gs, drift):
    p = cfg["params"]
    sweep, increments, residual, checkpoints = zvonkin_sweep(gs, drift, p, cfg["seed"])
    lam_star = float(p["lambda_star"])
    max_ratio = _thr(cfg, "max_increment_ratio")
    grad_cap = _thr(cfg, "qn3_grad_bound")
    sups = [r[1] for r in sweep]
    ratios = [r[4] for r in residual[1:]]
    checks = {
        "increment_ratios": all(r[5] <= max_ratio for r in sweep if r[0] >= lam_star),
        "sup_norm_decreasing": all(b < a for a, b in zip(sups, sups[1:])),
        "qn3": all(r[10] for r in sweep if r[3] <= grad_cap),
        "residual_refinement": bool(ratios) and all(r >= _thr(cfg, "min_residual_ratio") for r in ratios),
    }
    doc = {
        "lambdas": [r[0] for r in sweep],
        "sup_norms": sups,
        "grad_bounds": [r[3] for r in sweep],
        "qn3": [{"lambda": r[0], "checked": r[9], "passed": r[10], "worst_slack": r[11]} for r in sweep],
        "residual_ratios": ratios,
        "drift_id": drift.drift_id,
    }
    tables = {"zvonkin_sweep.csv": (SWEEP_HEADER, sweep), "increments.csv": (INCREMENT_HEADER, increments),
              "residual.csv": (RESIDUAL_HEADER, residual)}
    return tables, {"zvonkin.json": doc}, checkpoints, checks, {"residual_ratios": ratios}


def _krylov(cfg, gs, drift):
    p = cfg["params"]
    n_paths, n_steps = _budget(cfg)
    lattice = _cube(p["lattice"], gs.dim)
    fb = p.get("f", {})
    f_base = bump_drift(gs.m, gs.d, float(fb.get("amplitude", 1.0)), float(fb.get("radius", 1.0)))
    pp, qq = float(p["p"]), float(p["q"])
    rows, records = krylov_suite(gs, drift, f_base, pp, qq, float(p["T"]), p["heights"], p["widths"], lattice,
                                 _start(p, gs), n_paths, cfg["seed"], n_steps)
    ratios = np.array([r[6] for r in rows])
    spread = float(ratios.max() / ratios.min()) if ratios.min() > 0 else float("inf")
    checks = {"kk1": check_KK1(pp, qq, gs.m, gs.d), "spread": spread <= _thr(cfg, "max_spread")}
    doc = {"spread": spread, "p": pp, "q": qq, "drift_id": drift.drift_id}
    return {"krylov.csv": (KRYLOV_HEADER, rows)}, {"krylov.json": doc, "norms.json": records}, {}, checks, {
        "spread": spread}


def _uniqueness(cfg, gs, drift):
    p = cfg["params"]
    n_paths, _ = _budget(cfg)
    cutoff = float(p.get("cutoff", np.inf))
    start = _start(p, gs)
    rep = pathwise_uniqueness_experiment(gs, drift, start, float(p["T"]), int(p["base_steps"]),
                                         int(p["n_levels"]), n_paths, cfg["seed"], cutoff)
    rows = [[r.level, r.dt, r.median_sup_diff, r.mean_sup_diff, r.escaped, r.clamp_fraction] for r in rep.rows]
    finest_steps = int(p["base_steps"]) * 2 ** int(p["n_levels"])
    control = distinct_noise_difference(gs, drift, start, float(p["T"]), finest_steps, n_paths, cfg["seed"],
                                        cfg["seed"] + 1, cutoff)
    in_scope = check_Hstar(drift.p, drift.q, gs.m, gs.d) if np.isfinite(drift.p) else True
    checks = {
        "monotone": rep.monotone or not _thr(cfg, "require_monotone"),
        "clamp": all(r.clamp_fraction <= _thr(cfg, "max_clamp_fraction") for r in rep.rows),
        "negative_control": control > rep.rows[0].median_sup_diff,
    }
    doc = {**rep.as_dict(), "negative_control_median": control,
           "scope": "within theorem scope" if in_scope else "outside theorem scope"}
    header = ["level", "dt", "median_sup_diff", "mean_sup_diff", "escaped", "clamp_fraction"]
    return {"uniqueness.csv": (header, rows)}, {"uniqueness.json": doc}, {}, checks, {
        "strong_order": rep.strong_order}


def _weak_strong(cfg, gs, drift):
    p = cfg["params"]
    n_paths, n_steps = _budget(cfg)
    cutoff = float(p.get("cutoff", np.inf))
    entries, zs = [], []
    for k, name in enumerate(p["observables"]):
        rep = weak_strong_compare(gs, drift, observable(name, gs.m), float(p["T"]), _start(p, gs), n_paths,
                                  cfg["seed"] + 10 * k, n_steps, cutoff)
        entries.append({"observable": name, **rep.as_dict()})
        zs.append(rep.zscore)
    checks = {"zscores": all(abs(z) <= _thr(cfg, "max_abs_z") for z in zs)}
    doc = {"comparisons": entries, "drift_id": drift.drift_id, "note": LIFETIME_NOTE}
    return {}, {"comparison.json": doc}, {}, checks, {"zscores": zs}


def _group_checks(cfg, gs, drift):
    p = cfg["params"]
    errors = group_axiom_errors(gs, int(p["n_triples"]), cfg["seed"])
    report = gs.eps_certificate
    sampled = check_hypothesis_H(gs, int(p.get("h_samples", 20000)), seed=cfg["seed"]) \
        if p.get("sampled_h", False) else None
    table = hstar_table(p.get("hstar_cases", []), gs.m, gs.d)
    checks = {"axioms": max(errors.values()) <= _thr(cfg, "max_rel_error")}
    if "expect_eps_zero" in cfg["thresholds"] and _thr(cfg, "expect_eps_zero"):
        checks["eps_zero"] = report.eps_estimate == 0.0 and report.exact_orthogonal
    doc = {
        "axiom_errors": errors,
        "h_report": {"passed": report.passed, "eps_estimate": report.eps_estimate,
                     "exact_orthogonal": report.exact_orthogonal, "hs_lower_bound": report.hs_lower_bound,
                     "samples_used": report.samples_used},
        "g_mats": gs.g_mats,
        "z_drift": gs.z_drift,
    }
    if sampled is not None:
        doc["sampled_h"] = {"eps_estimate": sampled.eps_estimate, "samples_used": sampled.samples_used}
    tables = {"hstar.csv": (HSTAR_HEADER, table)} if table else {}
    return tables, {"group_checks.json": doc}, {}, checks, {"eps_estimate": report.eps_estimate}


DISPATCH = {
    "heat_kernel_exponent": _heat,
    "bismut_vs_fd": _bismut,
    "gradient_scaling": _scaling,
    "zvonkin_sweep": _zvonkin,
    "krylov_suite": _krylov,
    "uniqueness": _uniqueness,
    "weak_strong": _weak_strong,
    "group_checks": _group_checks,
}


def run_experiment(cfg, output=None):
    """Run a validated config; write reports and the manifest; return a RunResult.

    Module errors are re-raised as StageError naming the failing stage, after
    a manifest with ``status = 2`` has been written.
    """
    from .config import validate_config

    validate_config(cfg)
    started = time.time()
    out = Path(output or cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    stage = "build_group"
    written = []
    try:
        gs = group_from_config(cfg["group"])
        stage = "build_drift"
        drift = drift_from_config(cfg["drift"], gs.m, gs.d) if "drift" in cfg else None
        stage = cfg["experiment"]
        tables, docs, texts, checks, summary = DISPATCH[cfg["experiment"]](cfg, gs, drift)
        stage = "write_reports"
        for name, (header, rows) in tables.items():
            (out / name).write_text(csv_text(header, rows), encoding="utf-8")
            written.append(name)
        for name, doc in docs.items():
            (out / name).write_text(json_text(doc), encoding="utf-8")
            written.append(name)
        for name, text in texts.items():
            (out / name).write_text(text, encoding="utf-8")
            written.append(name)
    except (HeisenbergSDEError, ValueError, KeyError) as exc:
        if isinstance(exc, ConfigInvalid):
            raise
        write_manifest(out, cfg, started, 2, {}, written, failing_stage=stage)
        raise StageError(stage, exc) from exc
    checks = {k: bool(v) for k, v in checks.items()}
    status = 0 if all(checks.values()) else 1
    write_manifest(out, cfg, started, status, checks, written, summary=summary)
    return RunResult(status, checks, written, summary)
