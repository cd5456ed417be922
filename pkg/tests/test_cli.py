import json
import subprocess
import sys

import pytest

from heisenberg_sde.cli import main

HEAT_TOO_FEW = """
schema_version = 1
experiment = "heat_kernel_exponent"
seed = 1
output = "unused"
[group.remark31]
a = [0.5]
beta = [-0.5]
[budget]
n_paths = 50
n_steps = 4
[params]
t_set = [0.125, 0.25, 0.5, 1.0]
start = [0.0, 0.0, 0.0]
[thresholds]
slope_target = -2.0
slope_tol = 0.25
horizontal_target = -1.0
horizontal_tol = 0.15
"""


def test_validate(config_dir, capsys):
    assert main(["validate", str(config_dir / "zvonkin.toml")]) == 0
    assert "ok: zvonkin_sweep" in capsys.readouterr().out


def test_unknown_experiment_exits_nonzero(tmp_path, config_dir, capsys):
    text = (config_dir / "group_checks.toml").read_text().replace('"group_checks"', '"nonsense"')
    path = tmp_path / "bad.toml"
    path.write_text(text)
    assert main(["validate", str(path)]) == 2
    assert main(["run", str(path), "-o", str(tmp_path / "out")]) == 2
    assert "invalid config" in capsys.readouterr().err
    assert main(["validate", str(tmp_path / "missing.toml")]) == 2


def test_run_passing_config(tmp_path, config_dir, capsys):
    out = tmp_path / "g"
    assert main(["run", str(config_dir / "group_checks.toml"), "-o", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert "PASS axioms" in lines and "PASS eps_zero" in lines
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == 0 and man["summary"]["eps_estimate"] == 0.0
    assert sorted(man["files"]) == ["group_checks.json", "hstar.csv"]


def test_run_failing_check_exits_one(tmp_path, config_dir, capsys):
    assert main(["run", str(config_dir / "group_checks_m3.toml"), "-o", str(tmp_path / "m3")]) == 1
    assert "FAIL eps_zero" in capsys.readouterr().out


def test_stage_error_exits_two_and_names_stage(tmp_path, capsys):
    path = tmp_path / "heat.toml"
    path.write_text(HEAT_TOO_FEW)
    out = tmp_path / "heat"
    assert main(["run", str(path), "-o", str(out)]) == 2
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == 2 and man["failing_stage"] == "heat_kernel_exponent"
    assert "heat_kernel_exponent" in capsys.readouterr().err


def test_report(tmp_path, config_dir, capsys):
    out = tmp_path / "g"
    main(["run", str(config_dir / "group_checks.toml"), "-o", str(out)])
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    text = capsys.readouterr().out
    assert "== manifest.json" in text and "hstar.csv: 5 rows, checksum ok" in text
    assert main(["report", str(tmp_path / "nowhere")]) == 2


def test_module_entry_point(config_dir):
    proc = subprocess.run([sys.executable, "-m", "heisenberg_sde", "validate", str(config_dir / "krylov.toml")],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    proc = subprocess.run([sys.executable, "-m", "heisenberg_sde", "--help"], capture_output=True, text=True)
    assert "HEISENBERG_SDE_WORKERS" in proc.stdout


def test_missing_subcommand():
    with pytest.raises(SystemExit):
        main([])
