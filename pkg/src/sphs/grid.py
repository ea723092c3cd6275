"""Cell-centred grids and grid-discretised densities."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Box

NONNEG_TOL = 1e-12
MASS_TOL = 1e-10


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred grid over a :class:`Box`."""

    box: Box
    shape: tuple

    def __post_init__(self):
        shape = tuple(int(s) for s in np.ravel(self.shape))
        if len(shape) != self.box.dim:
            raise GridError(f"grid has {len(shape)} axes but box has dim {self.box.dim}")
        if any(s < 1 for s in shape):
            raise GridError("grid sizes must be positive")
        object.__setattr__(self, "shape", shape)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def spacing(self) -> np.ndarray:
        return (np.array(self.box.hi) - np.array(self.box.lo)) / np.array(self.shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def axes(self) -> list:
        h = self.spacing
        return [lo + (np.arange(s) + 0.5) * hi for lo, s, hi in zip(self.box.lo, self.shape, h)]

    def points(self) -> np.ndarray:
        """Cell centres with shape ``shape + (ndim,)``."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack(mesh, axis=-1)

    def flat_points(self) -> np.ndarray:
        return self.points().reshape(-1, self.ndim)

    def integrate(self, values) -> float:
        return float(np.sum(values) * self.cell_volume)


@dataclass
class DensityField:
    """Grid function on cell centres, usually a probability density."""

    grid: Grid
    values: np.ndarray
    normalized: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.shape)

    @classmethod
    def from_function(cls, grid: Grid, fn, normalize: bool = False) -> "DensityField":
        values = np.asarray(fn(grid.points()), dtype=float)
        out = cls(grid, values)
        return out.normalize() if normalize else out

    @property
    def box(self) -> Box:
        return self.grid.box

    def mass(self) -> float:
        return self.grid.integrate(self.values)

    def normalize(self) -> "DensityField":
        m = self.mass()
        if not m > 0:
            raise GridError("cannot normalise a field with non-positive mass")
        return DensityField(self.grid, self.values / m, normalized=True, meta=dict(self.meta))

    def check(self) -> None:
        if self.values.min() < -NONNEG_TOL:
            raise GridError(f"density has negative values down to {self.values.min():.3e}")
        if self.normalized and abs(self.mass() - 1.0) > MASS_TOL:
            raise GridError(f"normalised density has mass {self.mass():.12f}")

    def mean(self) -> np.ndarray:
        P = self.grid.points()
        w = self.values / self.values.sum()
        return np.tensordot(w, P, axes=(tuple(range(self.grid.ndim)), tuple(range(self.grid.ndim))))

    def covariance(self) -> np.ndarray:
        P = self.grid.points().reshape(-1, self.grid.ndim)
        w = self.values.ravel() / self.values.sum()
        mu = w @ P
        D = P - mu
        return (D * w[:, None]).T @ D


def d1(arr: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Second-order first derivative; one-sided second-order at the edges."""
    return np.gradient(arr, h, axis=axis, edge_order=2)


def d2(arr: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Compact second derivative with one-sided second-order edge stencils."""
    a = np.moveaxis(np.asarray(arr, dtype=float), axis, 0)
    if a.shape[0] < 4:
        raise GridError("second derivative needs at least 4 points per axis")
    out = np.empty_like(a)
    out[1:-1] = (a[2:] - 2.0 * a[1:-1] + a[:-2]) / h**2
    out[0] = (2.0 * a[0] - 5.0 * a[1] + 4.0 * a[2] - a[3]) / h**2
    out[-1] = (2.0 * a[-1] - 5.0 * a[-2] + 4.0 * a[-3] - a[-4]) / h**2
    return np.moveaxis(out, 0, axis)
