"""Energy shaping: matching equation, shaping conditions and the shaped closed loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .generator import GeneratorContext, apply_generator
from .model import (
    ANTISYMMETRY_TOL,
    PSD_TOL,
    ControlLaw,
    EnergyFunction,
    ModelError,
    SphsModel,
    as_field,
    fd_jacobian,
    matvec,
    quad_form,
)
from .passivity import classify_ultimate_passivity
from .sde import LinearModelView, kalman_rank

MATCHING_TOL = 1e-10
EQUILIBRIUM_TOL = 1e-10
POSDEF_TOL = 1e-10
INTEGRABILITY_TOL = 1e-8
FD_INTEGRABILITY_TOL = 1e-5
DRIFT_TOL = 1e-10
NOISE_TOL = 1e-10
_GL_NODES = 32


class ShapingError(ModelError):
    pass


def _transpose(M):
    return np.swapaxes(M, -1, -2)


@dataclass(frozen=True)
class ShapingPlan:
    """Shaping data ``(J_a, R_a, K, phi)`` aimed at ``x_e``.

    ``K_jacobian`` defaults to central finite differences of ``K``; ``H_a``
    is an optional closed-form antiderivative of ``K``.
    """

    J_a: Callable
    R_a: Callable
    K: Callable
    phi: Callable
    x_e: np.ndarray
    m: int
    K_jacobian: Optional[Callable] = None
    H_a: Optional[EnergyFunction] = None
    name: str = ""

    @classmethod
    def build(cls, n, m, J_a, R_a, K, phi, x_e, K_jacobian=None, H_a=None, name=""):
        x_e = np.array(x_e, dtype=float).ravel()
        if x_e.size != n:
            raise ShapingError(f"x_e has {x_e.size} entries, expected {n}")
        if H_a is not None and H_a.dim != n:
            raise ShapingError(f"H_a dim {H_a.dim} != {n}")
        return cls(
            as_field(J_a, (n, n)),
            as_field(R_a, (n, n)),
            as_field(K, (n,)),
            as_field(phi, (m,)),
            x_e,
            int(m),
            K_jacobian,
            H_a,
            name,
        )

    @classmethod
    def zero(cls, n: int, m: int, x_e=None) -> "ShapingPlan":
        z = np.zeros(n) if x_e is None else x_e
        return cls.build(n, m, np.zeros((n, n)), np.zeros((n, n)), np.zeros(n), np.zeros(m), z, H_a=None, name="zero")

    def jacobian(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.K_jacobian is not None:
            return np.asarray(self.K_jacobian(x), dtype=float)
        return fd_jacobian(self.K, x)

    def control(self) -> ControlLaw:
        return ControlLaw.state_feedback(self.phi, self.m)


def matching_residual(model: SphsModel, plan: ShapingPlan, x) -> np.ndarray:
    """``(J + J_a - R - R_a) K - (g phi - (J_a - R_a) dH)`` at ``x``."""
    x = np.asarray(x, dtype=float)
    Ja, Ra = plan.J_a(x), plan.R_a(x)
    lhs = matvec(model.J(x) + Ja - model.R(x) - Ra, plan.K(x))
    gphi = matvec(model.input_map(x), plan.phi(x)) if model.m else 0.0
    rhs = gphi - matvec(Ja - Ra, model.hamiltonian.gradient(x))
    return lhs - rhs


# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------


def line_integral_potential(K: Callable, jacobian: Callable, x0, n: int) -> EnergyFunction:
    """``H_a(x) = int_0^1 K(x0 + t (x - x0)) . (x - x0) dt`` by Gauss-Legendre.

    Gradient and Hessian are ``K`` and its Jacobian, which is exact when
    ``K`` is a gradient field.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    t, w = np.polynomial.legendre.leggauss(_GL_NODES)
    t = 0.5 * (t + 1.0)
    w = 0.5 * w

    def value(x):
        d = np.asarray(x, dtype=float) - x0
        acc = np.zeros(d.shape[:-1])
        for ti, wi in zip(t, w):
            acc += wi * np.sum(K(x0 + ti * d) * d, axis=-1)
        return acc

    return EnergyFunction(n, value, lambda x: np.asarray(K(np.asarray(x, dtype=float))), jacobian, name="H_a")


def _shaping_potential(plan: ShapingPlan, n: int) -> EnergyFunction:
    if plan.H_a is not None:
        return plan.H_a
    return line_integral_potential(plan.K, plan.jacobian, plan.x_e, n)


# ---------------------------------------------------------------------------
# conditions
# ---------------------------------------------------------------------------


@dataclass
class ConditionResult:
    passed: Optional[bool]
    residual: Optional[float]
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"passed": self.passed, "residual": self.residual}
        out.update(self.detail)
        return out


@dataclass
class ShapingReport:
    matching: ConditionResult
    conditions: dict

    @property
    def passed(self) -> bool:
        if not self.matching.passed:
            return False
        return all(c.passed is not False for c in self.conditions.values())

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "matching": self.matching.to_dict(),
            "conditions": {k: v.to_dict() for k, v in self.conditions.items()},
        }


def _structure_condition(model, plan, X) -> ConditionResult:
    Jd = model.J(X) + plan.J_a(X)
    Rd = model.R(X) + plan.R_a(X)
    anti = float(np.max(np.abs(Jd + _transpose(Jd))))
    sym = float(np.max(np.abs(Rd - _transpose(Rd))))
    min_eig = float(np.min(np.linalg.eigvalsh(0.5 * (Rd + _transpose(Rd)))))
    ok = anti <= ANTISYMMETRY_TOL and sym <= ANTISYMMETRY_TOL and min_eig >= -PSD_TOL
    return ConditionResult(ok, max(anti, sym, max(0.0, -min_eig)), {"J_d_antisymmetry": anti, "R_d_symmetry": sym, "R_d_min_eig": min_eig})


def _integrability_condition(plan, X) -> ConditionResult:
    DK = plan.jacobian(X)
    asym = float(np.max(np.abs(DK - _transpose(DK))))
    scale = 1.0 + float(np.max(np.abs(DK)))
    tol = INTEGRABILITY_TOL if plan.K_jacobian is not None else FD_INTEGRABILITY_TOL
    return ConditionResult(asym <= tol * scale, asym, {"jacobian": "closed_form" if plan.K_jacobian is not None else "finite_difference"})


def _equilibrium_condition(model, plan) -> ConditionResult:
    xe = plan.x_e
    K = plan.K(xe)
    mgH = -model.hamiltonian.gradient(xe)
    res = float(np.max(np.abs(K - mgH)))
    return ConditionResult(res <= EQUILIBRIUM_TOL * (1.0 + float(np.max(np.abs(mgH)))), res, {"K_xe": K.tolist(), "minus_grad_H_xe": mgH.tolist()})


def _stability_condition(model, plan) -> ConditionResult:
    xe = plan.x_e
    M = plan.jacobian(xe) + model.hamiltonian.hessian(xe)
    min_eig = float(np.min(np.linalg.eigvalsh(0.5 * (M + M.T))))
    return ConditionResult(min_eig >= POSDEF_TOL, min_eig, {"min_eig": min_eig})


def _noise_condition(model, X, linear_view) -> ConditionResult:
    Sig = model.diffusion(X)
    min_eig = float(np.min(np.linalg.eigvalsh(Sig)))
    detail = {"vi_a_min_eig": min_eig, "vi_a": min_eig > NOISE_TOL}
    ok = min_eig > NOISE_TOL
    if linear_view is not None:
        rank, ctrl = kalman_rank(linear_view.A, linear_view.Sigma_map)
        detail.update({"vi_b_kalman_rank": rank, "vi_b": ctrl})
        ok = ok or ctrl
    return ConditionResult(ok, min_eig, detail)


def check_conditions(
    model: SphsModel,
    plan: ShapingPlan,
    probes,
    shell_params: Optional[dict] = None,
    linear_view: Optional[LinearModelView] = None,
) -> ShapingReport:
    """Evaluate the matching equation and shaping conditions (i)-(vi) on probes.

    ``shell_params`` (``radii``, ``eps`` and optionally ``n_samples``,
    ``seed``) enables condition (v); without it (v) is reported as not
    evaluated.  ``linear_view`` enables the Kalman-rank route for (vi).
    """
    X = np.atleast_2d(np.asarray(probes, dtype=float))
    if X.shape[0] == 0:
        raise ShapingError("need at least one probe")
    X = X[model.is_admissible(X)]
    res = matching_residual(model, plan, X)
    mres = float(np.max(np.abs(res))) if res.size else 0.0
    matching = ConditionResult(mres <= MATCHING_TOL, mres)
    conds = {
        "i_structure": _structure_condition(model, plan, X),
        "ii_integrability": _integrability_condition(plan, X),
        "iii_equilibrium": _equilibrium_condition(model, plan),
        "iv_stability": _stability_condition(model, plan),
    }
    if shell_params:
        shaped = shaped_model(model, plan)
        ctx = GeneratorContext(shaped)
        rep = classify_ultimate_passivity(
            ctx,
            shaped.hamiltonian,
            plan.x_e,
            shell_params["radii"],
            shell_params["eps"],
            n_samples=int(shell_params.get("n_samples", 256)),
            seed=int(shell_params.get("seed", 0)),
        )
        strict = rep.verdict.delta is not None
        worst = float(np.nanmax(rep.sup_raw))
        conds["v_ultimate_passivity"] = ConditionResult(strict, worst, {"shells": rep.to_dict()})
    else:
        conds["v_ultimate_passivity"] = ConditionResult(None, None, {"evaluated": False})
    conds["vi_uniqueness"] = _noise_condition(model, X, linear_view)
    return ShapingReport(matching, conds)


# ---------------------------------------------------------------------------
# shaped system
# ---------------------------------------------------------------------------


def shaped_model(model: SphsModel, plan: ShapingPlan) -> SphsModel:
    """SPHS with ``J_d = J + J_a``, ``R_d = R + R_a`` and ``H_d = H + H_a`` (no checks)."""
    H_a = _shaping_potential(plan, model.n)
    Jm, Rm, Ja, Ra = model.J, model.R, plan.J_a, plan.R_a
    return model.replace(
        J=lambda x: Jm(x) + Ja(x),
        R=lambda x: Rm(x) + Ra(x),
        hamiltonian=model.hamiltonian + H_a,
        linear=None,
        name=(model.name + "_shaped") if model.name else "shaped",
    )


@dataclass
class ShapedSystem:
    """Closed loop written as an autonomous SPHS in ``(J_d, R_d, H_d)``.

    Two outputs are exposed: ``output_original`` is ``g^T dH`` and
    ``output_shaped`` is ``g^T dH_d``.
    """

    model: SphsModel
    original: SphsModel
    plan: ShapingPlan
    max_drift_error: float = 0.0

    @property
    def hamiltonian(self) -> EnergyFunction:
        return self.model.hamiltonian

    def context(self) -> GeneratorContext:
        return GeneratorContext(self.model)

    def output_original(self, x) -> np.ndarray:
        return self.original.output(x)

    def output_shaped(self, x) -> np.ndarray:
        return self.model.output(x)


def closed_loop_drift(model: SphsModel, plan: ShapingPlan, x) -> np.ndarray:
    return GeneratorContext(model, plan.control()).drift(x)


def assemble_shaped(model: SphsModel, plan: ShapingPlan, probes) -> ShapedSystem:
    """Build the shaped SPHS after checking matching, (i) and (ii) on ``probes``.

    The autonomous drift of the result is compared with the closed-loop drift
    ``(J - R) dH + g phi`` at every probe.
    """
    X = np.atleast_2d(np.asarray(probes, dtype=float))
    X = X[model.is_admissible(X)]
    res = float(np.max(np.abs(matching_residual(model, plan, X))))
    if res > MATCHING_TOL:
        raise ShapingError(f"matching residual {res:.3e} exceeds {MATCHING_TOL:g}")
    cond_i = _structure_condition(model, plan, X)
    if not cond_i.passed:
        raise ShapingError(f"condition (i) structure preservation fails: {cond_i.detail}")
    cond_ii = _integrability_condition(plan, X)
    if plan.H_a is None and not cond_ii.passed:
        raise ShapingError(
            f"no H_a supplied and K is not integrable (condition (ii) asymmetry {cond_ii.residual:.3e})"
        )
    shaped = shaped_model(model, plan)
    target = closed_loop_drift(model, plan, X)
    got = shaped.drift0(X)
    err = float(np.max(np.abs(got - target) / (1.0 + np.abs(target))))
    if err > DRIFT_TOL:
        raise ShapingError(f"shaped drift differs from closed-loop drift by {err:.3e}")
    return ShapedSystem(shaped, model, plan, err)


def dissipation_rate(shaped, x) -> np.ndarray:
    """``dH_d^T R_d dH_d``, zero exactly on the set where dissipation vanishes."""
    model = shaped.model if isinstance(shaped, ShapedSystem) else shaped
    gH = model.hamiltonian.gradient(x)
    return quad_form(gH, model.R(x), gH)


def generator_bound_gap(model: SphsModel, plan: ShapingPlan, x) -> np.ndarray:
    """``L H_d - (L0 H + La H_a)`` at ``x``.

    ``L`` is the generator of the shaped SPHS, ``L0`` that of the unforced
    original, ``La`` that of the SPHS with structure ``(J_a, R_a)`` and noise
    ``sigma``.  The bound ``L H_d <= L0 H + La H_a`` holds where this is
    ``<= 0``; algebraically the gap is
    ``-(dH^T R_a dH + 2 dH^T R_d K + K^T R K)``.
    """
    x = np.asarray(x, dtype=float)
    H_a = _shaping_potential(plan, model.n)
    shaped = shaped_model(model, plan)
    LHd = apply_generator(GeneratorContext(shaped), shaped.hamiltonian, x)
    L0H = apply_generator(GeneratorContext(model), model.hamiltonian, x)
    gHa = H_a.gradient(x)
    LaHa = quad_form(gHa, plan.J_a(x) - plan.R_a(x), gHa) + 0.5 * np.einsum(
        "...ij,...ji->...", model.diffusion(x), H_a.hessian(x)
    )
    return LHd - (L0H + LaHa)


def generator_bound_gap_closed_form(model: SphsModel, plan: ShapingPlan, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    gH = model.hamiltonian.gradient(x)
    K = plan.K(x)
    R, Ra = model.R(x), plan.R_a(x)
    return -(quad_form(gH, Ra, gH) + 2.0 * quad_form(gH, R + Ra, K) + quad_form(K, R, K))


def is_strict_local_minimum(shaped: ShapedSystem, tol: float = POSDEF_TOL) -> tuple:
    """``(|dH_d(x_e)|, min eig hess H_d(x_e))`` and whether ``x_e`` is a strict minimum."""
    xe = shaped.plan.x_e
    g = float(np.max(np.abs(shaped.hamiltonian.gradient(xe))))
    e = float(np.min(np.linalg.eigvalsh(shaped.hamiltonian.hessian(xe))))
    return g, e, (g <= EQUILIBRIUM_TOL * 10 and e >= tol)
