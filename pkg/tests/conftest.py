import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

import heisenberg_sde as hs

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("pkg", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("pkg")

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="session")
def kohn():
    return hs.kohn_laplacian_group()


@pytest.fixture(scope="session")
def skew_group():
    """m=2, d=1 with a non-identity theta, so the group law is not the Kohn one."""
    return hs.build_group([[2.0, 1.0], [0.0, 1.0]], [[[0.0, 1.0], [-1.0, 0.0]]])


@pytest.fixture(scope="session")
def group3():
    """m=3, d=2 built from explicit matrices with non-orthogonal brackets."""
    a1 = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    a2 = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.5], [-1.0, -0.5, 0.0]])
    return hs.build_group(np.eye(3), [a1, a2])


@pytest.fixture
def config_dir():
    return CONFIG_DIR


def _shrink(cfg):
    """Same experiment with a budget small enough for a unit test."""
    p, b = cfg["params"], cfg["budget"]
    exp = cfg["experiment"]
    if exp == "heat_kernel_exponent":
        b.update(n_paths=2000, n_steps=8)
    elif exp == "bismut_vs_fd":
        b.update(n_paths=1000, n_steps=8)
        p.update(functions=p["functions"][:2], directions=p["directions"][:2], base_points=p["base_points"][:1])
        cfg["thresholds"]["min_passing"] = 1
    elif exp == "gradient_scaling":
        b.update(n_paths=1000, n_steps=8)
    elif exp == "zvonkin_sweep":
        b.update(n_paths=50)
        p.update(lambdas=[16.0, 64.0], lambda_star=16.0, lattice={"half_width": 2.0, "nodes": 7},
                 n_fine=32, grid_paths=16, max_iter=5, qn3_pairs=50)
        p["residual"].update(lattice={"half_width": 1.5, "nodes": 7}, grid_paths=16, n_levels=2, n_paths=50)
    elif exp == "krylov_suite":
        b.update(n_paths=500, n_steps=16)
        p.update(lattice={"half_width": 1.0, "nodes": 11}, heights=[1.0, 10.0], widths=[1.0, 0.5])
    elif exp == "uniqueness":
        b.update(n_paths=200)
        p.update(base_steps=8, n_levels=2)
    elif exp == "weak_strong":
        b.update(n_paths=500, n_steps=8)
        p.update(observables=p["observables"][:2])
    elif exp == "group_checks":
        p.update(n_triples=200)
    return cfg


@pytest.fixture
def tiny_config(config_dir, tmp_path):
    from heisenberg_sde.config import load_config

    def make(name, output=None):
        cfg = _shrink(load_config(config_dir / f"{name}.toml"))
        cfg["output"] = str(output or tmp_path / name)
        return cfg

    return make


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
