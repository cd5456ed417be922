"""Report files: checksummed CSV tables, JSON documents and the run manifest.

Every CSV ends with ``# sha256=<hex>``, the digest of all bytes above that
line.  Data files contain nothing time- or host-dependent, so a rerun with
the same config and seed reproduces them byte for byte; the manifest holds
the wall time and environment.
"""

import csv
import hashlib
import io
import json
import os
import platform
import time
from pathlib import Path

import numpy as np

from .errors import HeisenbergSDEError
from .estimators import WORKERS_ENV

CHECKSUM_PREFIX = "# sha256="
MANIFEST_NAME = "manifest.json"


class ChecksumMismatch(HeisenbergSDEError, ValueError):
    pass


def _plain(obj):
    """Recursively convert numpy scalars/arrays and tuples into JSON types."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if hasattr(obj, "as_dict"):
        return _plain(obj.as_dict())
    return obj


def _cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    return str(value)


def csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    body = buf.getvalue()
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    return f"{body}{CHECKSUM_PREFIX}{digest}\n"


def write_csv(path, header, rows):
    path = Path(path)
    path.write_text(csv_text(header, rows), encoding="utf-8")
    return path


def read_csv(path, verify=True):
    """Header and rows (as strings) of a checksummed CSV."""
    text = Path(path).read_text(encoding="utf-8")
    body, sep, tail = text.rpartition(CHECKSUM_PREFIX)
    if not sep:
        raise ChecksumMismatch(f"{path} has no checksum line")
    if verify and hashlib.sha256(body.encode("utf-8")).hexdigest() != tail.strip():
        raise ChecksumMismatch(f"{path} checksum does not match its contents")
    rows = list(csv.reader(io.StringIO(body)))
    return rows[0], rows[1:]


def json_text(obj):
    return json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_json(path, obj):
    path = Path(path)
    path.write_text(json_text(obj), encoding="utf-8")
    return path


def versions():
    import numba
    import scipy

    from . import __version__

    return {
        "heisenberg_sde": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


def write_manifest(out_dir, cfg, started, status, checks, files, failing_stage=None, summary=None):
    manifest = {
        "config": cfg,
        "seed": cfg.get("seed"),
        "versions": versions(),
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "wall_time_s": round(time.time() - started, 3),
        "workers_env": {WORKERS_ENV: os.environ.get(WORKERS_ENV)},
        "status": status,
        "checks": checks,
        "files": sorted(files),
        "failing_stage": failing_stage,
        "summary": summary or {},
    }
    return write_json(Path(out_dir) / MANIFEST_NAME, manifest)


def pretty_reports(directory):
    """Human-readable dump of every JSON report in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")
    chunks = []
    for path in sorted(directory.glob("*.json")):
        data = json.loads(path.read_text(encoding="utf-8"))
        chunks.append(f"== {path.name}\n{json.dumps(data, indent=2, sort_keys=True)}")
    for path in sorted(directory.glob("*.csv")):
        try:
            header, rows = read_csv(path)
            state = f"{len(rows)} rows, checksum ok"
        except ChecksumMismatch as exc:
            state = str(exc)
        chunks.append(f"== {path.name}: {state}")
    return "\n".join(chunks)
