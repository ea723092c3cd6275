"""Itô generator, its formal adjoint, and the quadratic additive-noise summary."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grid import DensityField, Grid, GridError, d1, d2
from .model import ControlLaw, ControlledSde, EnergyFunction, ModelError, matvec

MIN_GRID_POINTS = 5


class NonFiniteError(FloatingPointError):
    """A generator term evaluated to NaN/Inf at a finite state."""

    def __init__(self, term: str, count: int):
        super().__init__(f"non-finite value in generator term {term!r} at {count} point(s)")
        self.term = term
        self.count = count


@dataclass(frozen=True)
class GeneratorContext:
    """A model together with the input law that closes it."""

    model: ControlledSde
    control: Optional[ControlLaw] = None

    def __post_init__(self):
        control = self.control if self.control is not None else ControlLaw.zero(self.model.m)
        if control.dim != self.model.m:
            raise ModelError(f"control dimension {control.dim} does not match model input dimension {self.model.m}")
        object.__setattr__(self, "control", control)

    @property
    def n(self) -> int:
        return self.model.n

    def autonomous(self) -> "GeneratorContext":
        return GeneratorContext(self.model, ControlLaw.zero(self.model.m))

    def u(self, x) -> np.ndarray:
        return self.control(x)

    def drift(self, x) -> np.ndarray:
        if self.model.m == 0:
            return self.model.drift0(x)
        return self.model.drift(x, self.control(x))

    def diffusion(self, x) -> np.ndarray:
        return self.model.diffusion(x)

    def supply_rate(self, x) -> np.ndarray:
        """``y(x)^T u(x)``."""
        x = np.asarray(x, dtype=float)
        if self.model.m == 0:
            return np.zeros(x.shape[:-1])
        return np.sum(self.model.output(x) * self.control(x), axis=-1)


def _check_finite(term: str, values: np.ndarray, x: np.ndarray) -> None:
    finite_x = np.all(np.isfinite(x), axis=-1)
    bad = ~np.isfinite(values)
    if bad.ndim > finite_x.ndim:
        bad = bad.reshape(finite_x.shape + (-1,)).any(axis=-1)
    bad &= finite_x
    if np.any(bad):
        raise NonFiniteError(term, int(np.sum(bad)))


def generator_terms(ctx: GeneratorContext, f: EnergyFunction, x) -> dict:
    """Split ``L f(x)`` into drift and Itô-correction contributions.

    For SPHS models the drift part is further split into the ``J``, ``R`` and
    input contributions.
    """
    x = np.asarray(x, dtype=float)
    if f.dim != ctx.n:
        raise ModelError(f"function dim {f.dim} != model dim {ctx.n}")
    grad = f.gradient(x)
    _check_finite("gradient", grad, x)
    hess = f.hessian(x)
    _check_finite("hessian", hess, x)
    model = ctx.model
    terms = {}
    if model.is_sphs:
        gH = model.hamiltonian.gradient(x)
        terms["J"] = np.einsum("...i,...ij,...j->...", grad, model.J(x), gH)
        terms["R"] = -np.einsum("...i,...ij,...j->...", grad, model.R(x), gH)
    else:
        terms["drift0"] = np.sum(grad * model.drift0(x), axis=-1)
    if model.m > 0:
        terms["input"] = np.sum(grad * matvec(model.input_map(x), ctx.control(x)), axis=-1)
    for k, v in terms.items():
        _check_finite(k, v, x)
    ito = 0.5 * np.einsum("...ij,...ji->...", ctx.diffusion(x), hess)
    _check_finite("ito", ito, x)
    terms["ito"] = ito
    return terms


def apply_generator(ctx: GeneratorContext, f: EnergyFunction, x) -> np.ndarray:
    """``L f(x) = drift(x) . grad f(x) + 1/2 Tr[sigma sigma^T hess f(x)]``.

    The drift includes the control term ``g(x) u(x)``.  Evaluated pointwise
    from the closed-form derivatives of ``f``; ``x`` may be a batch.
    """
    x = np.asarray(x, dtype=float)
    if f.dim != ctx.n:
        raise ModelError(f"function dim {f.dim} != model dim {ctx.n}")
    grad = f.gradient(x)
    _check_finite("gradient", grad, x)
    drift = ctx.drift(x)
    _check_finite("drift", drift, x)
    first = np.sum(drift * grad, axis=-1)
    _check_finite("drift", first, x)
    ito = 0.5 * np.einsum("...ij,...ji->...", ctx.diffusion(x), f.hessian(x))
    _check_finite("ito", ito, x)
    return first + ito


# ---------------------------------------------------------------------------
# grid operators
# ---------------------------------------------------------------------------


def _grid_coefficients(ctx: GeneratorContext, grid: Grid):
    P = grid.points()
    return ctx.drift(P), ctx.diffusion(P)


def _check_grid(grid: Grid) -> None:
    if min(grid.shape) < MIN_GRID_POINTS:
        raise GridError(f"grid too coarse: need at least {MIN_GRID_POINTS} points per axis, got {grid.shape}")


def apply_adjoint(ctx: GeneratorContext, f_grid: DensityField) -> DensityField:
    """Fokker-Planck operator ``L* f = -sum_i d_i(mu_i f) + 1/2 sum_ij d_ij(Sigma_ij f)``.

    Second-order central differences in the interior and second-order
    one-sided stencils on boundary rows.
    """
    grid = f_grid.grid
    _check_grid(grid)
    mu, Sig = _grid_coefficients(ctx, grid)
    f = f_grid.values
    h = grid.spacing
    out = np.zeros_like(f)
    n = grid.ndim
    for i in range(n):
        out -= d1(mu[..., i] * f, h[i], i)
        out += 0.5 * d2(Sig[..., i, i] * f, h[i], i)
        for j in range(i + 1, n):
            cross = Sig[..., i, j] * f
            if np.any(cross):
                out += d1(d1(cross, h[i], i), h[j], j)
    return DensityField(grid, out, meta={"operator": "adjoint"})


def apply_generator_grid(ctx: GeneratorContext, f_grid: DensityField) -> DensityField:
    """``L f`` for grid values, with the same stencils as :func:`apply_adjoint`."""
    grid = f_grid.grid
    _check_grid(grid)
    mu, Sig = _grid_coefficients(ctx, grid)
    f = f_grid.values
    h = grid.spacing
    out = np.zeros_like(f)
    n = grid.ndim
    for i in range(n):
        out += mu[..., i] * d1(f, h[i], i)
        out += 0.5 * Sig[..., i, i] * d2(f, h[i], i)
        for j in range(i + 1, n):
            if np.any(Sig[..., i, j]):
                out += Sig[..., i, j] * d1(d1(f, h[i], i), h[j], j)
    return DensityField(grid, out, meta={"operator": "generator"})


# ---------------------------------------------------------------------------
# quadratic Hamiltonian, additive noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticSummary:
    """Closed-form pieces of ``L H`` for ``H = 1/2 x^T Lambda x`` and constant ``R, Sigma``.

    ``L H(x) - y^T u = -x^T (Lambda R Lambda) x + 1/2 Tr[Lambda Sigma]``.

    ``radius`` is the distance beyond which ``x^T Lambda R Lambda x >= Tr[Lambda Sigma]``
    holds in every direction; ``generator_radius`` is the (smaller) distance
    beyond which ``L H - y^T u <= 0`` holds in every direction.
    """

    coefficient: np.ndarray
    constant: float
    radius: float
    generator_radius: float

    def to_dict(self) -> dict:
        return {
            "coefficient": self.coefficient.tolist(),
            "constant": self.constant,
            "radius": self.radius,
            "generator_radius": self.generator_radius,
        }


def quadratic_case_summary(Lambda, R, Sigma, u=None, tol: float = 1e-12) -> QuadraticSummary:
    """Summarise the additive-noise, quadratic-Hamiltonian case.

    ``u`` is accepted for signature symmetry; the summary describes the
    input-independent part ``L H - y^T u``.
    """
    L = np.atleast_2d(np.asarray(Lambda, dtype=float))
    Rm = np.atleast_2d(np.asarray(R, dtype=float))
    S = np.atleast_2d(np.asarray(Sigma, dtype=float))
    if np.max(np.abs(L - L.T)) > 1e-12 or np.linalg.eigvalsh(0.5 * (L + L.T)).min() <= 0:
        raise ModelError("Lambda must be symmetric positive definite")
    Q = L @ Rm @ L
    Q = 0.5 * (Q + Q.T)
    const = float(np.trace(L @ S))
    eigs = np.linalg.eigvalsh(Q)
    lam_min, lam_max = float(eigs.min()), float(eigs.max())
    if const <= 0.0:
        radius = gen_radius = 0.0
    elif lam_min <= tol * max(1.0, abs(lam_max)):
        radius = gen_radius = float("inf")
    else:
        radius = float(np.sqrt(const / lam_min))
        gen_radius = float(np.sqrt(0.5 * const / lam_min))
    return QuadraticSummary(Q, const, radius, gen_radius)
