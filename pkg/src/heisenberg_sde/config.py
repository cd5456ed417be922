"""Experiment configuration: TOML files checked against a JSON schema.

A config names one experiment, the group, an optional drift, the path
budget, the seed, the output directory, experiment parameters and the
pass/fail thresholds.  Thresholds live here rather than in code so that
CI can tighten or loosen them without a rebuild.
"""

import copy
import sys

import jsonschema

from .errors import ConfigInvalid

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCHEMA_VERSION = 1

EXPERIMENTS = (
    "heat_kernel_exponent",
    "bismut_vs_fd",
    "gradient_scaling",
    "zvonkin_sweep",
    "krylov_suite",
    "uniqueness",
    "weak_strong",
    "group_checks",
)

_NUMBER = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}
_VECTOR = {"type": "array", "items": _NUMBER, "minItems": 1}
_POS_LIST = {"type": "array", "items": _POS, "minItems": 1}

_LATTICE = {
    "type": "object",
    "properties": {
        "half_width": _POS,
        "nodes": {"type": "integer", "minimum": 2},
        "center": _VECTOR,
    },
    "required": ["half_width", "nodes"],
    "additionalProperties": False,
}

_GROUP = {
    "type": "object",
    "oneOf": [
        {
            "properties": {
                "remark31": {
                    "type": "object",
                    "properties": {"a": _VECTOR, "beta": _VECTOR},
                    "required": ["a", "beta"],
                    "additionalProperties": False,
                }
            },
            "required": ["remark31"],
            "additionalProperties": False,
        },
        {
            "properties": {
                "m": {"type": "integer", "minimum": 2},
                "d": _POS_INT,
                "theta": _VECTOR,
                "a_mats": {"type": "array", "items": _VECTOR, "minItems": 1},
            },
            "required": ["m", "d", "theta", "a_mats"],
            "additionalProperties": False,
        },
    ],
}

_DRIFT = {
    "type": "object",
    "properties": {"name": {"type": "string"}},
    "required": ["name"],
}

# (required params, required thresholds) per experiment
_REQUIRED = {
    "heat_kernel_exponent": (["t_set", "start"], ["slope_target", "slope_tol", "horizontal_target", "horizontal_tol"]),
    "bismut_vs_fd": (["t", "functions", "directions", "base_points", "fd_eps"], ["max_abs_z", "min_passing"]),
    "gradient_scaling": (["t_set"], ["sigma_target", "sigma_tol", "y_target", "y_tol"]),
    "zvonkin_sweep": (
        ["lambdas", "lambda_star", "lattice", "residual"],
        ["max_increment_ratio", "qn3_grad_bound", "min_residual_ratio"],
    ),
    "krylov_suite": (["p", "q", "T", "heights", "widths", "lattice"], ["max_spread"]),
    "uniqueness": (["T", "start", "base_steps", "n_levels"], ["require_monotone", "max_clamp_fraction"]),
    "weak_strong": (["T", "start", "observables"], ["max_abs_z"]),
    "group_checks": (["n_triples"], ["max_rel_error"]),
}

SCHEMA = {
    "type": "object",
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "experiment": {"enum": list(EXPERIMENTS)},
        "seed": {"type": "integer", "minimum": 0},
        "output": {"type": "string", "minLength": 1},
        "group": _GROUP,
        "drift": _DRIFT,
        "budget": {
            "type": "object",
            "properties": {"n_paths": _POS_INT, "n_steps": _POS_INT, "lattice": _LATTICE},
            "required": ["n_paths"],
            "additionalProperties": False,
        },
        "params": {"type": "object"},
        "thresholds": {"type": "object"},
    },
    "required": ["schema_version", "experiment", "seed", "output", "group", "budget", "params", "thresholds"],
    "additionalProperties": False,
    "allOf": [
        {
            "if": {"properties": {"experiment": {"const": name}}},
            "then": {
                "properties": {
                    "params": {"required": params},
                    "thresholds": {"required": thresholds},
                }
            },
        }
        for name, (params, thresholds) in _REQUIRED.items()
    ],
}

_NEEDS_DRIFT = {"krylov_suite", "uniqueness", "weak_strong", "zvonkin_sweep"}


def validate_config(cfg):
    """Raise ConfigInvalid with the offending path if ``cfg`` breaks the schema."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigInvalid(f"{where}: {err.message}")
    if cfg["experiment"] in _NEEDS_DRIFT and "drift" not in cfg:
        raise ConfigInvalid(f"experiment {cfg['experiment']} needs a [drift] table")
    return cfg


def parse_config(text):
    try:
        cfg = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(f"not valid TOML: {exc}") from None
    return validate_config(cfg)


def load_config(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise ConfigInvalid(f"{path} is not UTF-8") from None
    return parse_config(text)


def with_overrides(cfg, **changes):
    """Deep copy with top-level keys replaced, re-validated."""
    out = copy.deepcopy(cfg)
    out.update(changes)
    return validate_config(out)
