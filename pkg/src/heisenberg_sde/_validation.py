"""Small input-validation helpers used across the package."""

import numpy as np

from .errors import DimensionMismatch, InvalidParam, NonFinite


def as_matrix(a, shape=None, name="matrix"):
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise DimensionMismatch(f"{name} must have shape {tuple(shape)}, got {arr.shape}")
    return arr


def as_vector(v, size=None, name="vector"):
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-D, got shape {arr.shape}")
    if size is not None and arr.shape[0] != size:
        raise DimensionMismatch(f"{name} must have length {size}, got {arr.shape[0]}")
    return arr


def as_points(z, dim, name="points"):
    """Return ``z`` as an (n, dim) float array; a single point becomes n=1."""
    arr = np.asarray(z, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise DimensionMismatch(f"{name} must have trailing dimension {dim}, got {arr.shape}")
    return arr


def check_positive(value, name, strict=True, allow_inf=False):
    if np.isnan(value) or (np.isinf(value) and not allow_inf) or (value <= 0 if strict else value < 0):
        kind = "> 0" if strict else ">= 0"
        raise InvalidParam(f"{name} must be {kind}, got {value!r}")
    return value


def check_positive_int(value, name, minimum=1):
    if int(value) != value or value < minimum:
        raise InvalidParam(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_finite(arr, what="values"):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"non-finite {what} encountered")
    return arr
