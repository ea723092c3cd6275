"""Strong and weak Casimirs, control by interconnection and Casimir reduction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .generator import GeneratorContext, apply_generator
from .model import ControlLaw, EnergyFunction, ModelError, SphsModel, matvec
from .shaping import ShapedSystem, ShapingPlan

CASIMIR_TOL = 1e-10
REDUCTION_TOL = 1e-8
COUPLING_TOL = 1e-12


@dataclass
class CasimirReport:
    """Per-condition maximum residuals over the probes; pass iff all are small."""

    residuals: dict
    tol: float = CASIMIR_TOL
    per_probe: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def holds(self) -> dict:
        return {k: bool(v <= self.tol) for k, v in self.residuals.items()}

    @property
    def passed(self) -> bool:
        return all(self.holds.values())

    def to_dict(self) -> dict:
        out = {"passed": self.passed, "tol": self.tol, "residuals": dict(self.residuals), "holds": self.holds}
        out.update(self.extra)
        return out


def _probes(probes, n) -> np.ndarray:
    X = np.atleast_2d(np.asarray(probes, dtype=float))
    if X.shape[0] == 0 or X.shape[-1] != n:
        raise ModelError(f"need a non-empty batch of probes of dimension {n}")
    return X


def _casimir_terms(model: SphsModel, C: EnergyFunction, X) -> dict:
    gC = C.gradient(X)
    sig = model.sigma(X)
    structure = np.max(np.abs(np.einsum("ki,kij->kj", gC, model.structure(X))), axis=-1)
    trace = np.abs(0.5 * np.einsum("kai,kab,kbi->k", sig, C.hessian(X), sig))
    noise = np.max(np.abs(np.einsum("ki,kij->kj", gC, sig)), axis=-1)
    return {"structure": structure, "ito_trace": trace, "noise": noise}


def check_strong_casimir(model: SphsModel, cand: EnergyFunction, probes) -> CasimirReport:
    """``dC^T (J - R) = 0``, ``1/2 Tr[sigma^T hess C sigma] = 0`` and ``dC^T sigma = 0``."""
    X = _probes(probes, model.n)
    terms = _casimir_terms(model, cand, X)
    return CasimirReport({k: float(np.max(v)) for k, v in terms.items()}, per_probe=terms)


def check_weak_casimir(model: SphsModel, cand: EnergyFunction, probes) -> CasimirReport:
    """The first two strong conditions only; ``C`` is then conserved in mean."""
    X = _probes(probes, model.n)
    terms = _casimir_terms(model, cand, X)
    terms.pop("noise")
    return CasimirReport({k: float(np.max(v)) for k, v in terms.items()}, per_probe=terms)


# ---------------------------------------------------------------------------
# interconnection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControllerSpec:
    """Controller SPHS on state ``z`` with external inputs ``v`` (plant) and ``v_c``."""

    model: SphsModel
    v: Optional[ControlLaw] = None
    v_c: Optional[ControlLaw] = None


def _split(n: int):
    def x_part(w):
        return np.asarray(w, dtype=float)[..., :n]

    def z_part(w):
        return np.asarray(w, dtype=float)[..., n:]

    return x_part, z_part


def stack_energy(H: EnergyFunction, Hc: EnergyFunction) -> EnergyFunction:
    """``H(x) + H_c(z)`` on the stacked state ``(x, z)``."""
    n, nc = H.dim, Hc.dim
    xp, zp = _split(n)

    def value(w):
        return H.value(xp(w)) + Hc.value(zp(w))

    def gradient(w):
        return np.concatenate([H.gradient(xp(w)), Hc.gradient(zp(w))], axis=-1)

    def hessian(w):
        w = np.asarray(w, dtype=float)
        out = np.zeros(w.shape[:-1] + (n + nc, n + nc))
        out[..., :n, :n] = H.hessian(xp(w))
        out[..., n:, n:] = Hc.hessian(zp(w))
        return out

    return EnergyFunction(n + nc, value, gradient, hessian, name=f"{H.name}+{Hc.name}")


def _plant_only(F: EnergyFunction, n_total: int) -> EnergyFunction:
    n = F.dim
    xp, _ = _split(n)

    def gradient(w):
        w = np.asarray(w, dtype=float)
        out = np.zeros(w.shape)
        out[..., :n] = F.gradient(xp(w))
        return out

    def hessian(w):
        w = np.asarray(w, dtype=float)
        out = np.zeros(w.shape[:-1] + (n_total, n_total))
        out[..., :n, :n] = F.hessian(xp(w))
        return out

    return EnergyFunction(n_total, lambda w: F.value(xp(w)), gradient, hessian, name=F.name)


def _controller_only(S: EnergyFunction, n: int) -> EnergyFunction:
    nc = S.dim
    _, zp = _split(n)

    def gradient(w):
        w = np.asarray(w, dtype=float)
        out = np.zeros(w.shape)
        out[..., n:] = S.gradient(zp(w))
        return out

    def hessian(w):
        w = np.asarray(w, dtype=float)
        out = np.zeros(w.shape[:-1] + (n + nc, n + nc))
        out[..., n:, n:] = S.hessian(zp(w))
        return out

    return EnergyFunction(n + nc, lambda w: S.value(zp(w)), gradient, hessian, name=S.name)


class InterconnectedSystem(SphsModel):
    """Plant and controller joined by ``u = -y_c + v``, ``u_c = y + v_c``.

    Structure on ``(x, z)``::

        J_tot = [[J, -g g_c^T], [g_c g^T, J_c]],  R_tot = diag(R, R_c)
        sigma_tot = diag(sigma, sigma_c),          g_tot = diag(g, g_c)

    Plant noise uses stream 0 and controller noise stream 1 in :func:`sde.simulate`.
    """

    def __init__(self, plant: SphsModel, ctrl: ControllerSpec):
        c = ctrl.model
        if plant.m != c.m:
            raise ModelError(f"plant input dim {plant.m} != controller output dim {c.m}")
        if plant.m == 0:
            raise ModelError("interconnection needs a plant with inputs")
        n, nc, m = plant.n, c.n, plant.m
        d, dc = plant.d, c.d
        xp, zp = _split(n)

        def J(w):
            x, z = xp(w), zp(w)
            g, gc = plant.g(x), c.g(z)
            out = np.zeros(np.shape(w)[:-1] + (n + nc, n + nc))
            out[..., :n, :n] = plant.J(x)
            out[..., :n, n:] = -np.einsum("...ik,...jk->...ij", g, gc)
            out[..., n:, :n] = np.einsum("...ik,...jk->...ij", gc, g)
            out[..., n:, n:] = c.J(z)
            return out

        def R(w):
            out = np.zeros(np.shape(w)[:-1] + (n + nc, n + nc))
            out[..., :n, :n] = plant.R(xp(w))
            out[..., n:, n:] = c.R(zp(w))
            return out

        def G(w):
            out = np.zeros(np.shape(w)[:-1] + (n + nc, 2 * m))
            out[..., :n, :m] = plant.g(xp(w))
            out[..., n:, m:] = c.g(zp(w))
            return out

        def sigma(w):
            out = np.zeros(np.shape(w)[:-1] + (n + nc, d + dc))
            out[..., :n, :d] = plant.sigma(xp(w))
            out[..., n:, d:] = c.sigma(zp(w))
            return out

        super().__init__(
            J,
            R,
            G,
            sigma,
            stack_energy(plant.hamiltonian, c.hamiltonian),
            n=n + nc,
            m=2 * m,
            d=d + dc,
            name=f"{plant.name}|{c.name}" if plant.name or c.name else "interconnected",
        )
        self.plant = plant
        self.controller = ctrl
        self.n_plant, self.n_ctrl = n, nc
        self.noise_blocks = ((0, 0, d), (1, d, d + dc))

    def external_control(self) -> ControlLaw:
        """Stacked ``(v, v_c)``; zero where unspecified."""
        ctrl = self.controller
        m = self.plant.m
        v = ctrl.v or ControlLaw.zero(m)
        vc = ctrl.v_c or ControlLaw.zero(m)
        if v.kind == "zero" and vc.kind == "zero":
            return ControlLaw.zero(2 * m)
        n = self.n_plant

        def law(w):
            w = np.asarray(w, dtype=float)
            return np.concatenate([v(w[..., :n]), vc(w[..., n:])], axis=-1)

        return ControlLaw.state_feedback(law, 2 * m)

    def split(self, w):
        w = np.asarray(w, dtype=float)
        return w[..., : self.n_plant], w[..., self.n_plant :]


def interconnect(plant: SphsModel, ctrl: ControllerSpec) -> InterconnectedSystem:
    return InterconnectedSystem(plant, ctrl)


def coupling_power(sys: InterconnectedSystem, w) -> np.ndarray:
    """Power ``dH_tot^T J_coupling dH_tot`` injected by the off-diagonal blocks."""
    x, z = sys.split(w)
    gH = sys.plant.hamiltonian.gradient(x)
    gHc = sys.controller.model.hamiltonian.gradient(z)
    g, gc = sys.plant.g(x), sys.controller.model.g(z)
    y = matvec(np.swapaxes(g, -1, -2), gH)
    yc = matvec(np.swapaxes(gc, -1, -2), gHc)
    return -np.sum(y * yc, axis=-1) + np.sum(yc * y, axis=-1)


def check_interconnection_casimir(sys: InterconnectedSystem, F: EnergyFunction, S: EnergyFunction, probes) -> CasimirReport:
    """Weak-Casimir residual of ``C(x, z) = F(x) - S(z)`` on the stacked system,
    plus the five sufficient conditions, each reported separately.

    ``residual`` is ``L C`` computed directly on the stacked model with zero
    external inputs.  The sufficient conditions are:

    1. ``dF^T J dF = dS^T J_c dS``
    2. ``R dF = 0``
    3. ``dS^T R_c = 0``
    4. ``dF^T J = dS^T g_c g^T``
    5. ``Tr[sigma^T hess F sigma - sigma_c^T hess S sigma_c] = 0``
    """
    n, nc = sys.n_plant, sys.n_ctrl
    if F.dim != n or S.dim != nc:
        raise ModelError("F must live on the plant state and S on the controller state")
    W = _probes(probes, n + nc)
    X, Z = sys.split(W)
    plant, c = sys.plant, sys.controller.model
    C = _plant_only(F, n + nc) - _controller_only(S, n)
    res = np.abs(apply_generator(GeneratorContext(sys), C, W))

    gF, gS = F.gradient(X), S.gradient(Z)
    J, Jc = plant.J(X), c.J(Z)
    g, gc = plant.g(X), c.g(Z)
    sig, sigc = plant.sigma(X), c.sigma(Z)
    c1 = np.abs(np.einsum("ki,kij,kj->k", gF, J, gF) - np.einsum("ki,kij,kj->k", gS, Jc, gS))
    c2 = np.max(np.abs(np.einsum("kij,kj->ki", plant.R(X), gF)), axis=-1)
    c3 = np.max(np.abs(np.einsum("ki,kij->kj", gS, c.R(Z))), axis=-1)
    lhs4 = np.einsum("ki,kij->kj", gF, J)
    rhs4 = np.einsum("ki,kia,kja->kj", gS, gc, g)
    c4 = np.max(np.abs(lhs4 - rhs4), axis=-1)
    c5 = np.abs(
        np.einsum("kai,kab,kbi->k", sig, F.hessian(X), sig) - np.einsum("kai,kab,kbi->k", sigc, S.hessian(Z), sigc)
    )
    per = {
        "residual": res,
        "cond1_skew_forms": c1,
        "cond2_R_dF": c2,
        "cond3_dS_Rc": c3,
        "cond4_dFJ_eq_dS_gc_gT": c4,
        "cond5_trace": c5,
    }
    rep = CasimirReport({k: float(np.max(v)) for k, v in per.items()}, per_probe=per)
    rep.extra["sufficient_conditions_pass"] = all(rep.holds[k] for k in per if k.startswith("cond"))
    rep.extra["residual_pass"] = rep.holds["residual"]
    return rep


# ---------------------------------------------------------------------------
# reduction on a Casimir level set
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineMap:
    """``S(z) = M z + b`` with explicit inverse."""

    M: np.ndarray
    b: np.ndarray

    @classmethod
    def identity(cls, k: int) -> "AffineMap":
        return cls(np.eye(k), np.zeros(k))

    def __call__(self, z):
        return matvec(self.M, np.asarray(z, dtype=float)) + self.b

    def inverse(self, s):
        return (np.asarray(s, dtype=float) - self.b) @ self.inverse_jacobian.T

    @property
    def inverse_jacobian(self) -> np.ndarray:
        return np.linalg.inv(self.M)


def _vector_map(Fs: Sequence[EnergyFunction]):
    def value(x):
        return np.stack([f.value(x) for f in Fs], axis=-1)

    def jac(x):
        return np.stack([f.gradient(x) for f in Fs], axis=-2)

    def hess(x):
        return np.stack([f.hessian(x) for f in Fs], axis=-3)

    return value, jac, hess


def reduced_hamiltonian(H: EnergyFunction, H_c: EnergyFunction, F, S: AffineMap, c) -> EnergyFunction:
    """``H_d(x) = H(x) + H_c(S^{-1}(c + F(x)))`` for affine ``S``."""
    Fs = list(F) if isinstance(F, (list, tuple)) else [F]
    Fv, FJ, FH = _vector_map(Fs)
    c = np.atleast_1d(np.asarray(c, dtype=float))
    Minv = S.inverse_jacobian

    def w_of(x):
        s = Fv(x) + c
        return matvec(np.broadcast_to(Minv, s.shape[:-1] + Minv.shape), s - S.b)

    def value(x):
        return H.value(x) + H_c.value(w_of(x))

    def gradient(x):
        Dw = np.einsum("ab,...bi->...ai", Minv, FJ(x))
        return H.gradient(x) + np.einsum("...ai,...a->...i", Dw, H_c.gradient(w_of(x)))

    def hessian(x):
        w = w_of(x)
        Dw = np.einsum("ab,...bi->...ai", Minv, FJ(x))
        D2w = np.einsum("ab,...bij->...aij", Minv, FH(x))
        gHc = H_c.gradient(w)
        return (
            H.hessian(x)
            + np.einsum("...ai,...ab,...bj->...ij", Dw, H_c.hessian(w), Dw)
            + np.einsum("...a,...aij->...ij", gHc, D2w)
        )

    return EnergyFunction(H.dim, value, gradient, hessian, name=f"{H.name}+H_c(S^-1(c+F))")


@dataclass
class ReductionReport:
    max_drift_error: float
    max_generator_error: float
    casimir: CasimirReport

    @property
    def passed(self) -> bool:
        return self.max_drift_error <= REDUCTION_TOL and self.max_generator_error <= REDUCTION_TOL

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_drift_error": self.max_drift_error,
            "max_generator_error": self.max_generator_error,
            "casimir": self.casimir.to_dict(),
        }


def casimir_level(F, S, x0, z0) -> np.ndarray:
    """``c = S(z0) - F(x0)`` so that the level set is ``S(z) = F(x) + c``."""
    Fs = list(F) if isinstance(F, (list, tuple)) else [F]
    Fv, _, _ = _vector_map(Fs)
    return np.atleast_1d(S(np.asarray(z0, dtype=float)) - Fv(np.asarray(x0, dtype=float)))


def reduce_on_casimir(
    sys: InterconnectedSystem,
    F,
    S,
    c,
    H_c: Optional[EnergyFunction] = None,
    probes=None,
    test_functions: Optional[Sequence[EnergyFunction]] = None,
) -> tuple:
    """Restrict the interconnected system to ``{S(z) = F(x) + c}``.

    Returns ``(ShapedSystem, ReductionReport)``.  The reduced plant SPHS has
    Hamiltonian ``H_d = H + H_c(S^{-1}(c + F))``.  At each probe ``x`` the
    reduced drift and generator are compared with the stacked ones at
    ``(x, S^{-1}(F(x) + c))``.  ``S`` must be an :class:`AffineMap`.
    """
    if not isinstance(S, AffineMap):
        raise ModelError("reduction needs an explicit inverse of S: pass an AffineMap")
    plant = sys.plant
    H_c = sys.controller.model.hamiltonian if H_c is None else H_c
    Fs = list(F) if isinstance(F, (list, tuple)) else [F]
    if len(Fs) != sys.n_ctrl:
        raise ModelError(f"need {sys.n_ctrl} Casimir components, got {len(Fs)}")
    Fv, _, _ = _vector_map(Fs)
    c = np.atleast_1d(np.asarray(c, dtype=float))
    Hd = reduced_hamiltonian(plant.hamiltonian, H_c, Fs, S, c)
    reduced = plant.replace(hamiltonian=Hd, name=(plant.name or "plant") + "_reduced")

    if probes is None:
        probes = np.random.default_rng(0).standard_normal((64, plant.n))
    X = _probes(probes, plant.n)
    Z = S.inverse(Fv(X) + c)
    W = np.concatenate([X, Z], axis=-1)
    stacked_drift = GeneratorContext(sys).drift(W)[..., : plant.n]
    red_drift = reduced.drift0(X)
    drift_err = float(np.max(np.abs(stacked_drift - red_drift) / (1.0 + np.abs(stacked_drift))))

    tests = list(test_functions) if test_functions else [plant.hamiltonian]
    gen_err = 0.0
    for phi in tests:
        a = apply_generator(GeneratorContext(sys), _plant_only(phi, sys.n), W)
        b = apply_generator(GeneratorContext(reduced), phi, X)
        gen_err = max(gen_err, float(np.max(np.abs(a - b) / (1.0 + np.abs(a)))))

    S_fns = [_affine_component(S, i) for i in range(sys.n_ctrl)]
    cas = [check_interconnection_casimir(sys, f, s, W) for f, s in zip(Fs, S_fns)]
    worst = max(cas, key=lambda r: r.residuals["residual"])
    plan = ShapingPlan.zero(plant.n, plant.m)
    shaped = ShapedSystem(reduced, plant, plan, drift_err)
    return shaped, ReductionReport(drift_err, gen_err, worst)


def _affine_component(S: AffineMap, i: int) -> EnergyFunction:
    row = np.asarray(S.M, dtype=float)[i]
    k = row.size

    def value(z):
        return np.asarray(z, dtype=float) @ row + S.b[i]

    def gradient(z):
        z = np.asarray(z, dtype=float)
        return np.broadcast_to(row, z.shape).copy()

    def hessian(z):
        z = np.asarray(z, dtype=float)
        return np.zeros(z.shape[:-1] + (k, k))

    return EnergyFunction(k, value, gradient, hessian, name=f"S{i}")


def reduction_conditions(H: EnergyFunction, H_c: EnergyFunction, F, S: AffineMap, c, x_e) -> dict:
    """Equilibrium assignment and stability of the reduced Hamiltonian at ``x_e``.

    ``equilibrium_residual`` is ``|dH_d(x_e)|``, i.e. the mismatch between the
    controller-energy gradient pulled back through ``S^{-1}(c + F)`` and
    ``-dH(x_e)``; ``stability_min_eig`` is the smallest eigenvalue of the
    reduced Hessian at ``x_e``.
    """
    Hd = reduced_hamiltonian(H, H_c, F, S, c)
    x_e = np.asarray(x_e, dtype=float)
    res = float(np.max(np.abs(Hd.gradient(x_e))))
    min_eig = float(np.min(np.linalg.eigvalsh(Hd.hessian(x_e))))
    return {
        "equilibrium_residual": res,
        "equilibrium_holds": res <= 1e-10 * (1.0 + float(np.max(np.abs(H.gradient(x_e))))),
        "stability_min_eig": min_eig,
        "stability_holds": min_eig >= 1e-10,
    }


__all__ = [
    "AffineMap",
    "CasimirReport",
    "ControllerSpec",
    "InterconnectedSystem",
    "ReductionReport",
    "casimir_level",
    "check_interconnection_casimir",
    "check_strong_casimir",
    "check_weak_casimir",
    "coupling_power",
    "interconnect",
    "reduce_on_casimir",
    "reduced_hamiltonian",
    "reduction_conditions",
    "stack_energy",
]
