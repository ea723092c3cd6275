"""Built-in models: the inverted pendulum and its shaping plans, the boost
(RLC) converter with its shaped Hamiltonian, a storage function whose
generator tends to zero without becoming negative, Ornstein-Uhlenbeck
testbeds and two Casimir examples."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .casimir import AffineMap, ControllerSpec
from .model import (
    ControlLaw,
    ControlledSde,
    EnergyFunction,
    SphsModel,
    linear_energy,
    quadratic_hamiltonian,
)
from .shaping import ShapingPlan

G_GRAV = 9.81
J2 = np.array([[0.0, 1.0], [-1.0, 0.0]])


def _cols(*cols):
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# inverted pendulum
# ---------------------------------------------------------------------------


def pendulum_hamiltonian(g_grav: float = G_GRAV) -> EnergyFunction:
    """``x2^2 / 2 + g cos x1``."""

    def value(x):
        x = np.asarray(x, dtype=float)
        return 0.5 * x[..., 1] ** 2 + g_grav * np.cos(x[..., 0])

    def gradient(x):
        x = np.asarray(x, dtype=float)
        return _cols(-g_grav * np.sin(x[..., 0]), x[..., 1])

    def hessian(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = -g_grav * np.cos(x[..., 0])
        out[..., 1, 1] = 1.0
        return out

    return EnergyFunction(2, value, gradient, hessian, name="pendulum")


def pendulum(g_grav: float = G_GRAV, noise: float = 1.0) -> SphsModel:
    """Inverted pendulum with additive noise ``noise * dW`` on both states."""
    return SphsModel(
        J2,
        np.zeros((2, 2)),
        np.array([[0.0], [1.0]]),
        noise * np.eye(2),
        pendulum_hamiltonian(g_grav),
        name="pendulum",
    )


def pendulum_plans(x1e: float = 0.0, g_grav: float = G_GRAV) -> dict:
    """Shaping plans with ``J_a = 0`` and ``R_a = diag(0, 1)``.

    ``full`` cancels gravity (``H_d`` quadratic), ``partial`` leaves it in
    place, ``broken`` pairs the full ``K`` with the partial feedback.
    """
    Ra = np.diag([0.0, 1.0])
    Ja = np.zeros((2, 2))
    xe = np.array([x1e, 0.0])

    def K_full(x):
        x = np.asarray(x, dtype=float)
        return _cols(x[..., 0] - x1e + g_grav * np.sin(x[..., 0]), np.zeros(x.shape[:-1]))

    def DK_full(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0 + g_grav * np.cos(x[..., 0])
        return out

    def K_partial(x):
        x = np.asarray(x, dtype=float)
        return _cols(x[..., 0] - x1e, np.zeros(x.shape[:-1]))

    def DK_partial(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0
        return out

    def phi_full(x):
        x = np.asarray(x, dtype=float)
        return (-x[..., 1] - (x[..., 0] - x1e) - g_grav * np.sin(x[..., 0]))[..., None]

    def phi_partial(x):
        x = np.asarray(x, dtype=float)
        return (-x[..., 1] - (x[..., 0] - x1e))[..., None]

    Ha_full = _pendulum_Ha(x1e, g_grav, cancel=True)
    Ha_partial = _pendulum_Ha(x1e, g_grav, cancel=False)
    return {
        "full": ShapingPlan.build(2, 1, Ja, Ra, K_full, phi_full, xe, DK_full, Ha_full, name="full"),
        "partial": ShapingPlan.build(2, 1, Ja, Ra, K_partial, phi_partial, xe, DK_partial, Ha_partial, name="partial"),
        "broken": ShapingPlan.build(2, 1, Ja, Ra, K_full, phi_partial, xe, DK_full, Ha_full, name="broken"),
    }


def _pendulum_Ha(x1e: float, g_grav: float, cancel: bool) -> EnergyFunction:
    gg = g_grav if cancel else 0.0

    def value(x):
        x = np.asarray(x, dtype=float)
        return 0.5 * (x[..., 0] - x1e) ** 2 - gg * np.cos(x[..., 0])

    def gradient(x):
        x = np.asarray(x, dtype=float)
        return _cols(x[..., 0] - x1e + gg * np.sin(x[..., 0]), np.zeros(x.shape[:-1]))

    def hessian(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (2, 2))
        out[..., 0, 0] = 1.0 + gg * np.cos(x[..., 0])
        return out

    return EnergyFunction(2, value, gradient, hessian, name="H_a")


def shaped_pendulum(x1e: float = 0.0, noise: float = 1.0) -> SphsModel:
    """Closed loop under the full plan: ``J``, ``R = diag(0, 1)`` and
    ``H_d = (x2^2 + (x1 - x1e)^2) / 2``; linear with ``A = [[0, 1], [-1, -1]]``."""
    xe = np.array([x1e, 0.0])
    Rs = np.diag([0.0, 1.0])
    return SphsModel(
        J2,
        Rs,
        np.array([[0.0], [1.0]]),
        noise * np.eye(2),
        quadratic_hamiltonian(np.eye(2), xe, name="H_d"),
        linear=(J2 - Rs, xe),
        name="pendulum_shaped",
    )


# ---------------------------------------------------------------------------
# slowly decaying generator
# ---------------------------------------------------------------------------


def log_squared_storage() -> EnergyFunction:
    """``log(1 + |x|)^2`` in one dimension."""

    def value(x):
        x = np.asarray(x, dtype=float)
        return np.log1p(np.abs(x[..., 0])) ** 2

    def gradient(x):
        x = np.asarray(x, dtype=float)
        a = np.abs(x[..., 0])
        return (2.0 * np.log1p(a) * np.sign(x[..., 0]) / (1.0 + a))[..., None]

    def hessian(x):
        x = np.asarray(x, dtype=float)
        a = np.abs(x[..., 0])
        return (2.0 * (1.0 - np.log1p(a)) / (1.0 + a) ** 2)[..., None, None]

    return EnergyFunction(1, value, gradient, hessian, name="log2")


def counterexample() -> ControlledSde:
    """``dX = X / (X^2 + 1) dt + dW`` with storage ``log(1 + |x|)^2``."""

    def drift(x):
        x = np.asarray(x, dtype=float)
        return x / (x * x + 1.0)

    return ControlledSde(1, 1, drift, np.eye(1), storage=log_squared_storage(), name="counterexample")


# ---------------------------------------------------------------------------
# boost converter
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RlcParams:
    L: float = 1.0
    C: float = 1.0
    R_L: float = 1.0
    E: float = 1.0
    V_d: float = 2.0
    c1: float = -0.02
    c3: float = -1.0
    alpha: float = 0.5
    sigma1: float = 1.0
    sigma2: float = 1.0
    margin: float = 0.05

    @property
    def c2(self) -> float:
        return -(2.0 * self.L * self.V_d**2 / (self.R_L**2 * self.E**2) + self.C) * self.c1 - self.c3 / self.V_d

    @property
    def a(self) -> float:
        return 2.0 / (self.R_L * self.E)

    @property
    def x_e(self) -> np.ndarray:
        return np.array([self.L * self.V_d**2 / (self.R_L * self.E), self.C * self.V_d])

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["c2"] = self.c2
        return d


def rlc_hamiltonian(p: RlcParams) -> EnergyFunction:
    return quadratic_hamiltonian(np.diag([1.0 / p.L, 1.0 / p.C]), name="H_rlc")


def rlc_shaped_hamiltonian(p: RlcParams) -> EnergyFunction:
    """Shaped converter energy with closed-form derivatives."""
    a, c1, c2, c3 = p.a, p.c1, p.c2, p.c3
    const = -p.L * p.V_d**4 / (2.0 * p.R_L**2 * p.E**2) + p.V_d * c3 / (2.0 * c1)

    def parts(x):
        x = np.asarray(x, dtype=float)
        return x[..., 0], x[..., 1], a * c1 * x[..., 0] + c2, c1 * x[..., 1] + c3

    def value(x):
        x1, x2, den, q = parts(x)
        return x1**2 / (2 * p.L) + x2**2 / (2 * p.C) + q**2 / (2 * c1 * den) + const

    def gradient(x):
        x1, x2, den, q = parts(x)
        return _cols(x1 / p.L - a * q**2 / (2 * den**2), x2 / p.C + q / den)

    def hessian(x):
        x1, x2, den, q = parts(x)
        out = np.empty(np.shape(x1) + (2, 2))
        out[..., 0, 0] = 1 / p.L + a * a * c1 * q**2 / den**3
        out[..., 0, 1] = out[..., 1, 0] = -a * c1 * q / den**2
        out[..., 1, 1] = 1 / p.C + c1 / den
        return out

    return EnergyFunction(2, value, gradient, hessian, name="H_d_rlc")


def rlc_admissible(p: RlcParams) -> Callable:
    """Keep the side of both singular lines that contains ``x_e``, with a margin."""
    a, c1, c2, c3 = p.a, p.c1, p.c2, p.c3
    xe = p.x_e
    s_den = np.sign(a * c1 * xe[0] + c2)
    s_q = np.sign(c1 * xe[1] + c3)

    def ok(x):
        x = np.asarray(x, dtype=float)
        den = a * c1 * x[..., 0] + c2
        q = c1 * x[..., 1] + c3
        return (s_den * den > p.margin) & (s_q * q > p.margin)

    return ok


def rlc(p: Optional[RlcParams] = None) -> SphsModel:
    p = p or RlcParams()
    return SphsModel(
        np.array([[0.0, p.alpha], [-p.alpha, 0.0]]),
        np.diag([0.0, 1.0 / p.R_L]),
        np.array([[p.E], [0.0]]),
        np.sqrt(2.0) * np.diag([p.sigma1, p.sigma2]),
        rlc_hamiltonian(p),
        name="rlc",
    )


def rlc_feedback(p: RlcParams) -> Callable:
    """``u = -E (a c1 x1 + c2) / (c1 x2 + c3)``."""

    def phi(x):
        x = np.asarray(x, dtype=float)
        return (-p.E * (p.a * p.c1 * x[..., 0] + p.c2) / (p.c1 * x[..., 1] + p.c3))[..., None]

    return phi


def rlc_shaped(p: Optional[RlcParams] = None) -> SphsModel:
    """Shaped converter as an autonomous SPHS in ``(J, diag(0, 1/R_L), H_d)``."""
    p = p or RlcParams()
    return SphsModel(
        np.array([[0.0, p.alpha], [-p.alpha, 0.0]]),
        np.diag([0.0, 1.0 / p.R_L]),
        np.array([[p.E], [0.0]]),
        np.sqrt(2.0) * np.diag([p.sigma1, p.sigma2]),
        rlc_shaped_hamiltonian(p),
        admissible=rlc_admissible(p),
        name="rlc_shaped",
        probe=p.x_e,
    )


def rlc_generator_closed_form(p: RlcParams, x) -> np.ndarray:
    """``L H_d`` written out term by term (independent of :mod:`generator`)."""
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    den = p.a * p.c1 * x1 + p.c2
    q = p.c1 * x2 + p.c3
    diss = -(1.0 / p.R_L) * (x2 / p.C + q / den) ** 2
    t1 = (1.0 / p.L + 4.0 * p.c1 * q**2 / (p.R_L**2 * p.E**2 * den**3)) * p.sigma1**2
    t2 = (1.0 / p.C + p.c1 / den) * p.sigma2**2
    return diss + t1 + t2


def rlc_generator_at_equilibrium(p: RlcParams) -> float:
    """Equilibrium value of ``L H_d`` after substituting ``x_e`` and ``c2``."""
    s = p.c1 * p.C * p.V_d + p.c3
    first = p.sigma1**2 * (1.0 / p.L - 4.0 * p.c1 * p.V_d**3 / (p.E**2 * p.R_L**2 * s))
    second = p.sigma2**2 * (p.c3 / (p.c3 * p.C + p.c1 * p.C**2 * p.V_d))
    return first + second


# ---------------------------------------------------------------------------
# Ornstein-Uhlenbeck testbeds
# ---------------------------------------------------------------------------


def ou(A, noise=None, name: str = "ou") -> SphsModel:
    """``dX = A X dt + noise dW`` written with ``H = |x|^2 / 2``,
    ``J = (A - A^T) / 2`` and ``R = -(A + A^T) / 2``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    S = np.eye(n) if noise is None else np.atleast_2d(np.asarray(noise, dtype=float)).reshape(n, -1)
    return SphsModel(
        0.5 * (A - A.T),
        -0.5 * (A + A.T),
        None,
        S,
        quadratic_hamiltonian(np.eye(n)),
        linear=(A, np.zeros(n)),
        name=name,
    )


def ou_nonreversible() -> SphsModel:
    return ou([[-1.0, 1.0], [-1.0, -1.0]], name="ou2")


def ou_reversible(Lambda=None) -> SphsModel:
    """Gradient drift ``-Lambda x`` with noise ``sqrt(2) I``: density ``exp(-H)``."""
    L = np.diag([1.0, 2.0]) if Lambda is None else np.asarray(Lambda, dtype=float)
    n = L.shape[0]
    return SphsModel(
        np.zeros((n, n)),
        np.eye(n),
        None,
        np.sqrt(2.0) * np.eye(n),
        quadratic_hamiltonian(L),
        linear=(-L, np.zeros(n)),
        name="ou_reversible",
    )


# ---------------------------------------------------------------------------
# Casimir examples
# ---------------------------------------------------------------------------


def casimir_3d(third_noise_row: bool = True) -> SphsModel:
    """Rank-deficient ``J`` in three dimensions with ``H = |x|^2 / 2``."""
    J = np.zeros((3, 3))
    J[0, 1], J[1, 0] = 1.0, -1.0
    sigma = np.eye(3)
    if not third_noise_row:
        sigma[2] = 0.0
    return SphsModel(J, np.zeros((3, 3)), None, sigma, quadratic_hamiltonian(np.eye(3)), name="casimir3d")


@dataclass
class InterconnectionExample:
    plant: SphsModel
    controller: ControllerSpec
    F: EnergyFunction
    S: AffineMap
    S_energy: EnergyFunction
    H_c: EnergyFunction
    c: float
    x_e: np.ndarray
    meta: dict = field(default_factory=dict)


def interconnection_example(
    x1e: float = 0.0,
    g_grav: float = G_GRAV,
    noise: float = 1.0,
    noise_c: float = 1.0,
    F_index: int = 0,
) -> InterconnectionExample:
    """Pendulum plant with an integrator controller, ``F = x_{F_index+1}``,
    ``S = z`` and ``H_c = w^2 / 2``; ``c = -x1e`` moves the position minimum."""
    plant = pendulum(g_grav, noise)
    ctrl_model = SphsModel(
        np.zeros((1, 1)),
        np.zeros((1, 1)),
        np.ones((1, 1)),
        noise_c * np.eye(1),
        quadratic_hamiltonian(np.eye(1), name="H_c"),
        name="integrator",
    )
    ctrl = ControllerSpec(ctrl_model, ControlLaw.zero(1), ControlLaw.zero(1))
    e = np.zeros(2)
    e[F_index] = 1.0
    return InterconnectionExample(
        plant=plant,
        controller=ctrl,
        F=linear_energy(e, name=f"x{F_index + 1}"),
        S=AffineMap.identity(1),
        S_energy=linear_energy([1.0], name="z"),
        H_c=ctrl_model.hamiltonian,
        c=-float(x1e),
        x_e=np.array([x1e, 0.0]),
    )

