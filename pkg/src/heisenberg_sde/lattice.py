"""Axis-aligned box lattices in R^N."""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParam


@dataclass(frozen=True, eq=False)
class SpaceLattice:
    """Uniform node lattice on ``[lower, upper]`` with ``shape[i]`` nodes on axis i.

    Node-based quantities (solver fields, fractional Laplacian) use ``axes``;
    midpoint quadrature uses the ``shape[i] - 1`` cell centres per axis.
    """

    lower: np.ndarray
    upper: np.ndarray
    shape: tuple

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        shape = tuple(int(n) for n in self.shape)
        if lo.shape != hi.shape or lo.ndim != 1 or len(shape) != lo.shape[0]:
            raise InvalidParam("lower, upper and shape must agree in length")
        if np.any(hi <= lo) or min(shape) < 2:
            raise InvalidParam("need upper > lower and at least 2 nodes per axis")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "shape", shape)

    @classmethod
    def cube(cls, half_width, n, ndim, center=None):
        c = np.zeros(ndim) if center is None else np.asarray(center, dtype=float)
        return cls(c - half_width, c + half_width, (n,) * ndim)

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def spacing(self):
        return (self.upper - self.lower) / (np.asarray(self.shape) - 1)

    @property
    def axes(self):
        return [np.linspace(lo, hi, n) for lo, hi, n in zip(self.lower, self.upper, self.shape)]

    @property
    def cell_centres(self):
        return [0.5 * (a[1:] + a[:-1]) for a in self.axes]

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    def node_points(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def centre_points(self):
        mesh = np.meshgrid(*self.cell_centres, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def contains(self, points):
        points = np.asarray(points, dtype=float)
        return np.all((points >= self.lower) & (points <= self.upper), axis=-1)

    def refined(self):
        return SpaceLattice(self.lower, self.upper, tuple(2 * n - 1 for n in self.shape))

    def as_dict(self):
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist(), "shape": list(self.shape)}

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data["lower"], float), np.asarray(data["upper"], float), tuple(data["shape"]))
