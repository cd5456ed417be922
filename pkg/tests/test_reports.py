import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from heisenberg_sde.estimators import WORKERS_ENV
from heisenberg_sde.reports import (
    CHECKSUM_PREFIX,
    ChecksumMismatch,
    csv_text,
    json_text,
    pretty_reports,
    read_csv,
    write_csv,
    write_manifest,
)

floats = st.floats(allow_nan=False, allow_infinity=True, width=64)


@given(st.lists(st.tuples(st.integers(-10**6, 10**6), floats, st.booleans()), max_size=20))
def test_csv_round_trip(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("csv") / "t.csv"
    write_csv(path, ["i", "x", "flag"], rows)
    header, back = read_csv(path)
    assert header == ["i", "x", "flag"]
    assert [(int(a), float(b), c == "true") for a, b, c in back] == [(a, b, c) for a, b, c in rows]


def test_checksum_line_and_tamper_detection(tmp_path):
    path = write_csv(tmp_path / "t.csv", ["a"], [[1.5], [2.5]])
    text = path.read_text()
    assert text.splitlines()[-1].startswith(CHECKSUM_PREFIX)
    assert text == csv_text(["a"], [[1.5], [2.5]])
    path.write_text(text.replace("2.5", "2.6"))
    with pytest.raises(ChecksumMismatch):
        read_csv(path)
    assert read_csv(path, verify=False)[1] == [["1.5"], ["2.6"]]
    (tmp_path / "n.csv").write_text("a\n1\n")
    with pytest.raises(ChecksumMismatch):
        read_csv(tmp_path / "n.csv")


def test_json_text_is_canonical():
    doc = {"b": np.float64(1.5), "a": np.arange(3), "c": (np.bool_(True), np.int64(4))}
    text = json_text(doc)
    assert text == json_text(dict(reversed(list(doc.items()))))
    assert json.loads(text) == {"a": [0, 1, 2], "b": 1.5, "c": [True, 4]}


def test_manifest_fields(tmp_path, monkeypatch):
    monkeypatch.setenv(WORKERS_ENV, "3")
    cfg = {"seed": 5, "experiment": "x"}
    write_manifest(tmp_path, cfg, 0.0, 1, {"a": False}, ["b.csv", "a.csv"], failing_stage=None)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["config"] == cfg and man["seed"] == 5 and man["status"] == 1
    assert man["workers_env"] == {WORKERS_ENV: "3"}
    assert man["files"] == ["a.csv", "b.csv"]
    assert {"heisenberg_sde", "python", "numpy", "scipy", "numba"} <= set(man["versions"])
    assert man["wall_time_s"] > 0


def test_pretty_reports(tmp_path):
    write_csv(tmp_path / "t.csv", ["a"], [[1]])
    (tmp_path / "r.json").write_text('{"x": 1}')
    out = pretty_reports(tmp_path)
    assert "== r.json" in out and "t.csv: 1 rows, checksum ok" in out
    with pytest.raises(FileNotFoundError):
        pretty_reports(tmp_path / "missing")
