"""Monte Carlo result container and the chunked path-reduction contract.

Per-path values are always gathered into one array (in ascending path
index) before a single reduction, so the estimate depends only on
``(seed, config)`` and not on the chunk size or worker count.
"""

import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import NonFinite

WORKERS_ENV = "HEISENBERG_SDE_WORKERS"
DEFAULT_CHUNK = 8192


@dataclass(frozen=True)
class EstimatorResult:
    value: float
    stderr: float
    n_samples: int
    seed: int
    flagged_fraction: float = 0.0

    def __post_init__(self):
        if not self.stderr >= 0:
            raise ValueError(f"stderr must be >= 0, got {self.stderr}")
        if not 0.0 <= self.flagged_fraction <= 1.0:
            raise ValueError("flagged_fraction must lie in [0, 1]")

    def zscore(self, target):
        """Signed distance to ``target`` in units of stderr (inf if stderr is 0 and they differ)."""
        diff = self.value - target
        if self.stderr == 0.0:
            return 0.0 if diff == 0.0 else float("inf") * np.sign(diff)
        return diff / self.stderr

    def as_dict(self):
        return asdict(self)


def workers_from_env():
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def path_chunks(n_paths, chunk=DEFAULT_CHUNK):
    for start in range(0, n_paths, chunk):
        yield start, min(chunk, n_paths - start)


def map_path_chunks(fn, n_paths, chunk=DEFAULT_CHUNK, n_jobs=None):
    """Apply ``fn(offset, size)`` to consecutive path chunks and concatenate in path order."""
    n_jobs = workers_from_env() if n_jobs is None else n_jobs
    chunks = list(path_chunks(n_paths, chunk))
    if n_jobs > 1 and len(chunks) > 1:
        from joblib import Parallel, delayed

        parts = Parallel(n_jobs=n_jobs)(delayed(fn)(off, size) for off, size in chunks)
    else:
        parts = [fn(off, size) for off, size in chunks]
    return np.concatenate(parts, axis=0)


def mean_result(values, seed, flagged_fraction=0.0):
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise NonFinite("non-finite per-path values")
    n = values.shape[0]
    mean = float(np.mean(values))
    stderr = float(np.std(values, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return EstimatorResult(mean, stderr, n, int(seed), float(flagged_fraction))


def fsum_mean(values):
    """Order-independent (compensated) mean, for unordered reductions."""
    import math

    values = np.asarray(values, dtype=float).ravel()
    return math.fsum(values.tolist()) / values.size
