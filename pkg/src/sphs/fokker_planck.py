"""Grid Fokker-Planck solves, backward Kolmogorov evolution and the
symmetric/antisymmetric split of the generator in the invariant-density
inner product.

The spatial discretisation is a rate matrix ``G`` on cell centres: for each
axis the neighbour rates are ``D_ii / h^2 +- mu_i / (2 h)`` (central) or the
upwind variant, with ``D = sigma sigma^T / 2``; mixed second derivatives use
the four diagonal neighbours.  Rates leaving the box are dropped, which
gives a zero-flux boundary.  ``G`` annihilates constants, the backward
operator is ``G`` and the forward (Fokker-Planck) operator is ``G^T``.
"""

from __future__ import annotations

import csv
import itertools
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .generator import GeneratorContext, apply_adjoint, apply_generator, apply_generator_grid
from .grid import DensityField, Grid, GridError
from .model import Box, ControlLaw, ControlledSde, EnergyFunction

DENSITY_MAGIC = b"SPHD"
FORMAT_VERSION = 1
MAX_DIM = 3
MASK_THRESHOLD = 1e-12


class FokkerPlanckError(ValueError):
    pass


class NonUniqueStationaryError(FokkerPlanckError):
    def __init__(self, n_classes: int, singular_values):
        self.n_classes = n_classes
        self.singular_values = tuple(float(s) for s in singular_values)
        sv = ", ".join(f"{s:.3e}" for s in self.singular_values)
        super().__init__(f"stationary density not unique: {n_classes} closed classes; smallest singular values [{sv}]")


# ---------------------------------------------------------------------------
# discrete generator
# ---------------------------------------------------------------------------


@dataclass
class DiscreteGenerator:
    grid: Grid
    matrix: sp.csr_matrix
    scheme: str
    negative_rates: int

    @property
    def adjoint(self) -> sp.csr_matrix:
        """Forward operator; the transpose of ``matrix`` (uniform cell volumes)."""
        return self.matrix.T.tocsr()

    def apply(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=float).reshape(-1)
        return (self.matrix @ v).reshape(self.grid.shape)

    def apply_adjoint(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=float).reshape(-1)
        return (self.matrix.T @ v).reshape(self.grid.shape)


def markov_generator(
    model: ControlledSde,
    grid: Grid,
    control: Optional[ControlLaw] = None,
    scheme: str = "central",
) -> DiscreteGenerator:
    """Assemble the sparse rate matrix of the closed-loop diffusion on ``grid``."""
    if grid.ndim > MAX_DIM:
        raise FokkerPlanckError(f"grids of dimension > {MAX_DIM} are not supported")
    if grid.ndim != model.n:
        raise FokkerPlanckError(f"grid dim {grid.ndim} != model dim {model.n}")
    if scheme not in ("central", "upwind"):
        raise FokkerPlanckError(f"unknown scheme {scheme!r}")
    ctx = GeneratorContext(model, control)
    P = grid.points()
    mu = ctx.drift(P)
    D = 0.5 * ctx.diffusion(P)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(D))):
        raise FokkerPlanckError("drift or diffusion is not finite on the grid")
    shape = grid.shape
    h = grid.spacing
    idx = np.arange(grid.size).reshape(shape)
    rows, cols, vals = [], [], []

    def add(rate, offset):
        # rate[cell] to neighbour cell + offset, dropped when it leaves the box
        src = [slice(None)] * grid.ndim
        dst = [slice(None)] * grid.ndim
        for ax, o in enumerate(offset):
            if o > 0:
                src[ax], dst[ax] = slice(0, shape[ax] - o), slice(o, None)
            elif o < 0:
                src[ax], dst[ax] = slice(-o, None), slice(0, shape[ax] + o)
        s, t = tuple(src), tuple(dst)
        r = rate[s]
        keep = r != 0.0
        rows.append(idx[s][keep])
        cols.append(idx[t][keep])
        vals.append(r[keep])

    n = grid.ndim
    for i in range(n):
        diff = D[..., i, i] / h[i] ** 2
        if scheme == "central":
            up = diff + mu[..., i] / (2.0 * h[i])
            down = diff - mu[..., i] / (2.0 * h[i])
        else:
            up = diff + np.maximum(mu[..., i], 0.0) / h[i]
            down = diff + np.maximum(-mu[..., i], 0.0) / h[i]
        e = [0] * n
        e[i] = 1
        add(up, tuple(e))
        e[i] = -1
        add(down, tuple(e))
        for j in range(i + 1, n):
            cross = 2.0 * D[..., i, j] / (4.0 * h[i] * h[j])
            if not np.any(cross):
                continue
            for si, sj in itertools.product((1, -1), repeat=2):
                e = [0] * n
                e[i], e[j] = si, sj
                add(si * sj * cross, tuple(e))
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    v = np.concatenate(vals)
    off = sp.csr_matrix((v, (r, c)), shape=(grid.size, grid.size))
    diag = -np.asarray(off.sum(axis=1)).ravel()
    G = (off + sp.diags(diag)).tocsr()
    G.sum_duplicates()
    return DiscreteGenerator(grid, G, scheme, int(np.sum(v < 0)))


def _closed_classes(G: sp.csr_matrix) -> int:
    """Number of closed communicating classes of the positive-rate graph."""
    off = G.copy().tolil()
    off.setdiag(0)
    off = off.tocsr()
    off.data = np.where(off.data > 0, 1.0, 0.0)
    off.eliminate_zeros()
    k, labels = connected_components(off, directed=True, connection="strong")
    if k == 1:
        return 1
    coo = off.tocoo()
    leaves = np.zeros(k, dtype=bool)
    leaves[labels[coo.row][labels[coo.row] != labels[coo.col]]] = True
    return int(np.sum(~leaves))


def _smallest_singular_values(A: sp.csr_matrix, k: int = 2) -> np.ndarray:
    if A.shape[0] <= 4096:
        return np.sort(np.linalg.svd(A.toarray(), compute_uv=False))[:k]
    from scipy.sparse.linalg import svds

    return np.sort(svds(A.tocsc(), k=k, which="SM", return_singular_vectors=False))


# ---------------------------------------------------------------------------
# stationary density
# ---------------------------------------------------------------------------


def stationary_solve(
    model: ControlledSde,
    box: Box,
    shape,
    control: Optional[ControlLaw] = None,
    scheme: str = "central",
) -> DensityField:
    """Solve ``G^T rho = 0`` with unit mass on the grid of ``box``.

    One equation is replaced by the mass constraint and the system is solved
    by sparse LU.  Uniqueness is checked structurally: the positive-rate
    graph must have exactly one closed class.
    """
    grid = Grid(box, shape)
    P = grid.points()
    if not np.any(model.diffusion(P)):
        raise FokkerPlanckError("diffusion vanishes identically on the grid")
    gen = markov_generator(model, grid, control, scheme)
    A = gen.adjoint.tolil()
    closed = _closed_classes(gen.matrix)
    if closed != 1:
        raise NonUniqueStationaryError(closed, _smallest_singular_values(gen.adjoint))
    row = grid.size // 2
    A[row, :] = grid.cell_volume
    b = np.zeros(grid.size)
    b[row] = 1.0
    rho = splu(A.tocsc()).solve(b)
    residual = float(np.max(np.abs(gen.adjoint @ rho)))
    neg = float(rho.min())
    rho = np.where((rho < 0) & (rho > -MASK_THRESHOLD * max(1.0, rho.max())), 0.0, rho)
    out = DensityField(grid, rho, normalized=True, meta={
        "residual": residual,
        "min_value": neg,
        "scheme": scheme,
        "negative_rates": gen.negative_rates,
    })
    out.meta["mass_error"] = abs(out.mass() - 1.0)
    return out


# ---------------------------------------------------------------------------
# backward evolution and conservation
# ---------------------------------------------------------------------------


def _values(f0, grid: Grid) -> np.ndarray:
    if isinstance(f0, DensityField):
        if f0.grid.shape != grid.shape:
            raise GridError("initial data grid does not match")
        return f0.values.ravel().copy()
    if isinstance(f0, EnergyFunction):
        return np.asarray(f0(grid.points()), dtype=float).ravel()
    if callable(f0):
        return np.asarray(f0(grid.points()), dtype=float).ravel()
    return np.asarray(f0, dtype=float).reshape(-1).copy()


class BackwardEvolution:
    """Implicit Euler ``(I - dt G) v_{k+1} = v_k`` with a cached LU factor."""

    def __init__(self, gen: DiscreteGenerator, dt: float):
        if dt <= 0:
            raise FokkerPlanckError("dt must be positive")
        self.gen = gen
        self.dt = float(dt)
        M = sp.identity(gen.grid.size, format="csc") - self.dt * gen.matrix.tocsc()
        self._lu = splu(M.tocsc())

    def step(self, v: np.ndarray) -> np.ndarray:
        return self._lu.solve(v)

    def run(self, v0: np.ndarray, n_steps: int, callback=None) -> np.ndarray:
        v = np.asarray(v0, dtype=float).ravel()
        for k in range(int(n_steps)):
            v = self.step(v)
            if callback is not None:
                callback(k + 1, v)
        return v


def evolve_backward(
    model: ControlledSde,
    f0,
    dt: float,
    n_steps: int,
    box: Optional[Box] = None,
    shape=None,
    control: Optional[ControlLaw] = None,
    scheme: str = "central",
) -> DensityField:
    """``v(t) = P_t f`` at ``t = n_steps dt`` from ``dv/dt = L v`` on the grid.

    ``f0`` is a :class:`DensityField`-shaped set of values (its grid is
    used) or a function evaluated on the grid of ``box`` and ``shape``.
    """
    if isinstance(f0, DensityField):
        grid = f0.grid
    else:
        if box is None or shape is None:
            raise FokkerPlanckError("box and shape are required unless f0 is a DensityField")
        grid = Grid(box, shape)
    gen = markov_generator(model, grid, control, scheme)
    v = BackwardEvolution(gen, dt).run(_values(f0, grid), n_steps)
    return DensityField(grid, v, meta={"kind": "backward", "t": dt * n_steps})


@dataclass
class ConservationReport:
    times: np.ndarray
    values: np.ndarray

    @property
    def max_deviation(self) -> float:
        return float(np.max(np.abs(self.values - self.values[0])))

    @property
    def deviation_per_unit_time(self) -> float:
        T = float(self.times[-1]) if self.times[-1] > 0 else 1.0
        return self.max_deviation / T

    def to_dict(self) -> dict:
        return {
            "initial": float(self.values[0]),
            "final": float(self.values[-1]),
            "max_deviation": self.max_deviation,
            "deviation_per_unit_time": self.deviation_per_unit_time,
        }


def conservation_audit(
    model: ControlledSde,
    rho: DensityField,
    f0,
    dt: float,
    n_steps: int,
    control: Optional[ControlLaw] = None,
    scheme: str = "central",
) -> ConservationReport:
    """Track ``int v(t_k) rho dx`` along the implicit backward evolution."""
    grid = rho.grid
    gen = markov_generator(model, grid, control, scheme)
    w = rho.values.ravel() * grid.cell_volume
    v0 = _values(f0, grid)
    series = [float(w @ v0)]
    BackwardEvolution(gen, dt).run(v0, n_steps, callback=lambda k, v: series.append(float(w @ v)))
    return ConservationReport(np.arange(n_steps + 1) * dt, np.array(series))


# ---------------------------------------------------------------------------
# inner product and decomposition
# ---------------------------------------------------------------------------


@dataclass
class WeightedInnerProduct:
    """``<f, g>_rho = int f g rho dx`` by the midpoint rule on ``rho``'s grid."""

    rho: DensityField
    threshold: float = MASK_THRESHOLD

    @property
    def mask(self) -> np.ndarray:
        return self.rho.values >= self.threshold

    @property
    def masked_fraction(self) -> float:
        return 1.0 - float(np.mean(self.mask))

    def __call__(self, f, g) -> float:
        f = np.asarray(f, dtype=float).reshape(self.rho.grid.shape)
        g = np.asarray(g, dtype=float).reshape(self.rho.grid.shape)
        m = self.mask
        return float(np.sum((f * g * self.rho.values)[m]) * self.rho.grid.cell_volume)

    def norm(self, f) -> float:
        return float(np.sqrt(max(self(f, f), 0.0)))


@dataclass
class GridOperator:
    """One part of the generator split, acting on test functions.

    ``EnergyFunction`` arguments get the analytic ``L f`` at cell centres;
    arrays of grid values get the finite-difference ``L f``.  The adjoint
    part ``rho^{-1} L*(rho f)`` is always computed on the grid.  Masked
    cells (``rho`` below threshold) return 0.
    """

    ctx: GeneratorContext
    rho: DensityField
    sign: float
    mask: np.ndarray = field(repr=False, default=None)

    def _parts(self, f):
        grid = self.rho.grid
        if isinstance(f, EnergyFunction):
            fv = np.asarray(f(grid.points()), dtype=float)
            Lf = apply_generator(self.ctx, f, grid.points())
        else:
            fv = np.asarray(f, dtype=float).reshape(grid.shape)
            Lf = apply_generator_grid(self.ctx, DensityField(grid, fv)).values
        adj = apply_adjoint(self.ctx, DensityField(grid, self.rho.values * fv)).values
        with np.errstate(divide="ignore", invalid="ignore"):
            back = np.where(self.mask, adj / self.rho.values, 0.0)
        return np.where(self.mask, Lf, 0.0), back

    def __call__(self, f) -> np.ndarray:
        Lf, back = self._parts(f)
        return 0.5 * (Lf + self.sign * back)


def decompose_generator(model: ControlledSde, rho: DensityField, control: Optional[ControlLaw] = None) -> tuple:
    """``(L_s, L_as)`` with ``L_s f = (L f + rho^{-1} L*(rho f)) / 2`` and
    ``L_as f = (L f - rho^{-1} L*(rho f)) / 2``, so ``L = L_s + L_as``."""
    mask = rho.values >= MASK_THRESHOLD
    if not np.any(mask):
        raise FokkerPlanckError("rho is below the positivity threshold everywhere")
    ctx = GeneratorContext(model, control)
    Ls = GridOperator(ctx, rho, +1.0, mask)
    Las = GridOperator(ctx, rho, -1.0, mask)
    return Ls, Las


def symmetry_defects(Ls: GridOperator, Las: GridOperator, f, g) -> tuple:
    """``(|<g, L_s f> - <L_s g, f>|, |<g, L_as f> + <L_as g, f>|)`` in ``<., .>_rho``."""
    ip = WeightedInnerProduct(Ls.rho)
    grid = Ls.rho.grid
    fv = f(grid.points()) if isinstance(f, EnergyFunction) else np.asarray(f)
    gv = g(grid.points()) if isinstance(g, EnergyFunction) else np.asarray(g)
    s = abs(ip(gv, Ls(f)) - ip(Ls(g), fv))
    a = abs(ip(gv, Las(f)) + ip(Las(g), fv))
    return s, a


def infinitesimal_invariance(gen: DiscreteGenerator, rho: DensityField, f) -> float:
    """``<1, G f>_rho``; vanishes up to solver error when ``G^T rho = 0``."""
    fv = _values(f, gen.grid)
    return float(rho.values.ravel() @ (gen.matrix @ fv) * gen.grid.cell_volume)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def density_to_csv(field_: DensityField, path) -> None:
    P = field_.grid.flat_points()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(field_.grid.ndim)] + ["value"])
        for p, v in zip(P, field_.values.ravel()):
            w.writerow([repr(float(c)) for c in p] + [repr(float(v))])


def density_from_csv(path, box: Box, shape) -> DensityField:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return DensityField(Grid(box, shape), data[:, -1])


_DENS_HEADER = struct.Struct("<4sIII")


def density_to_binary(field_: DensityField, path) -> None:
    """Little-endian: ``magic, version, ndim, normalized`` then per axis
    ``size`` (uint32) and ``lo, hi`` (float64), then values (float64, C order)."""
    g = field_.grid
    with open(path, "wb") as fh:
        fh.write(_DENS_HEADER.pack(DENSITY_MAGIC, FORMAT_VERSION, g.ndim, int(field_.normalized)))
        fh.write(np.asarray(g.shape, dtype="<u4").tobytes())
        fh.write(np.asarray(g.box.lo, dtype="<f8").tobytes())
        fh.write(np.asarray(g.box.hi, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(field_.values, dtype="<f8").tobytes())


def density_from_binary(path) -> DensityField:
    with open(path, "rb") as fh:
        magic, version, ndim, normalized = _DENS_HEADER.unpack(fh.read(_DENS_HEADER.size))
        if magic != DENSITY_MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported version {version}")
        shape = tuple(int(s) for s in np.frombuffer(fh.read(4 * ndim), dtype="<u4"))
        lo = np.frombuffer(fh.read(8 * ndim), dtype="<f8")
        hi = np.frombuffer(fh.read(8 * ndim), dtype="<f8")
        vals = np.frombuffer(fh.read(8 * int(np.prod(shape))), dtype="<f8").reshape(shape).copy()
    return DensityField(Grid(Box(tuple(lo), tuple(hi)), shape), vals, normalized=bool(normalized))
