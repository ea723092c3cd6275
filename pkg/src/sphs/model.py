"""Stochastic port-Hamiltonian system data model.

All maps in this module are *batch aware*: a state argument has shape
``(..., n)`` and results carry the same leading batch shape.  A single point
is simply the case of an empty batch shape.

The controlled Itô SDE of a stochastic port-Hamiltonian system (SPHS) reads::

    dX = [(J - R) dH(X) + g(X) u] dt + sigma(X) dW
    y  = g(X)^T dH(X)

:class:`SphsModel` stores ``J, R, g, sigma, H``; :class:`ControlledSde` is the
more general control-affine diffusion ``dX = [mu(X) + G(X) u] dt + sigma dW``
used for storage-function examples that are not in port-Hamiltonian form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

Array = np.ndarray
StateMap = Callable[[Array], Array]

ANTISYMMETRY_TOL = 1e-12
PSD_TOL = 1e-10
FD_REL_TOL = 1e-5
FD_STEP = 1e-5
SYMMETRY_TOL = 1e-12


class ModelError(ValueError):
    """Raised when a model is assembled from inconsistent pieces."""


def _as_state(x) -> Array:
    return np.asarray(x, dtype=float)


def constant_field(value, shape: Optional[tuple] = None) -> StateMap:
    """Wrap a constant array as a batch-aware state map."""
    arr = np.array(value, dtype=float)
    if shape is not None:
        if arr.size != int(np.prod(shape)):
            raise ModelError(f"expected an array of shape {shape}, got {arr.shape}")
        arr = arr.reshape(shape)
    arr.setflags(write=False)

    def fn(x):
        x = _as_state(x)
        return np.broadcast_to(arr, x.shape[:-1] + arr.shape)

    fn.constant = arr  # type: ignore[attr-defined]
    return fn


def as_field(value, shape: Optional[tuple] = None) -> StateMap:
    """Return ``value`` if callable, else wrap it with :func:`constant_field`."""
    if callable(value):
        return value
    return constant_field(value, shape)


def matvec(M: Array, v: Array) -> Array:
    """Batched ``M @ v`` for ``M`` of shape (..., a, b) and ``v`` of shape (..., b)."""
    return np.einsum("...ij,...j->...i", M, v)


def quad_form(v: Array, M: Array, w: Array) -> Array:
    return np.einsum("...i,...ij,...j->...", v, M, w)


# ---------------------------------------------------------------------------
# energy functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnergyFunction:
    """Scalar function with closed-form gradient and Hessian.

    Used for Hamiltonians, shaping terms, storage functions and Casimir
    candidates alike.  ``value``, ``gradient`` and ``hessian`` map states of
    shape ``(..., dim)`` to ``(...)``, ``(..., dim)`` and ``(..., dim, dim)``.
    """

    dim: int
    value: StateMap
    gradient: StateMap
    hessian: StateMap
    name: str = ""

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ModelError("EnergyFunction.dim must be positive")

    def __call__(self, x) -> Array:
        return self.value(_as_state(x))

    def _check_compatible(self, other: "EnergyFunction"):
        if not isinstance(other, EnergyFunction):
            return NotImplemented
        if other.dim != self.dim:
            raise ModelError(f"cannot combine energy functions of dims {self.dim} and {other.dim}")
        return None

    def __add__(self, other):
        if not isinstance(other, EnergyFunction):
            return NotImplemented
        self._check_compatible(other)
        a, b = self, other
        return EnergyFunction(
            self.dim,
            lambda x: a.value(x) + b.value(x),
            lambda x: a.gradient(x) + b.gradient(x),
            lambda x: a.hessian(x) + b.hessian(x),
            name=f"({a.name} + {b.name})",
        )

    def __mul__(self, scalar):
        if not np.isscalar(scalar):
            return NotImplemented
        c = float(scalar)
        a = self
        return EnergyFunction(
            self.dim,
            lambda x: c * a.value(x),
            lambda x: c * a.gradient(x),
            lambda x: c * a.hessian(x),
            name=f"{c:g}*{a.name}",
        )

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        if not isinstance(other, EnergyFunction):
            return NotImplemented
        return self + (-other)


def quadratic_hamiltonian(Lambda, center=None, name: str = "quadratic") -> EnergyFunction:
    """``H(x) = 1/2 (x - c)^T Lambda (x - c)`` with exact derivatives.

    ``Lambda`` must be symmetric positive definite.
    """
    L = np.atleast_2d(np.array(Lambda, dtype=float))
    n = L.shape[0]
    if L.shape != (n, n):
        raise ModelError("Lambda must be square")
    if np.max(np.abs(L - L.T)) > SYMMETRY_TOL * max(1.0, np.max(np.abs(L))):
        raise ModelError("Lambda must be symmetric")
    if np.linalg.eigvalsh(L).min() <= 0:
        raise ModelError("Lambda must be positive definite")
    c = np.zeros(n) if center is None else np.array(center, dtype=float).reshape(n)
    L.setflags(write=False)
    c.setflags(write=False)

    def value(x):
        d = _as_state(x) - c
        return 0.5 * quad_form(d, L, d)

    def gradient(x):
        return (_as_state(x) - c) @ L.T

    def hessian(x):
        x = _as_state(x)
        return np.broadcast_to(L, x.shape[:-1] + (n, n))

    fn = EnergyFunction(n, value, gradient, hessian, name=name)
    object.__setattr__(fn, "Lambda", L)
    object.__setattr__(fn, "center", c)
    return fn


def linear_energy(coeffs, offset: float = 0.0, name: str = "linear") -> EnergyFunction:
    """``C(x) = a . x + b``."""
    a = np.array(coeffs, dtype=float).ravel()
    n = a.size

    def value(x):
        return _as_state(x) @ a + offset

    def gradient(x):
        x = _as_state(x)
        return np.broadcast_to(a, x.shape).copy()

    def hessian(x):
        x = _as_state(x)
        return np.zeros(x.shape[:-1] + (n, n))

    return EnergyFunction(n, value, gradient, hessian, name=name)


def constant_energy(dim: int, c: float = 0.0, name: str = "constant") -> EnergyFunction:
    return linear_energy(np.zeros(dim), offset=c, name=name)


def zero_energy(dim: int) -> EnergyFunction:
    return constant_energy(dim, 0.0, name="0")


def gaussian_bump(center, width: float, amplitude: float = 1.0, name: str = "bump") -> EnergyFunction:
    """``a exp(-|x - c|^2 / (2 w^2))``; numerically compactly supported test function."""
    c = np.array(center, dtype=float).ravel()
    n = c.size
    w2 = float(width) ** 2

    def value(x):
        d = _as_state(x) - c
        return amplitude * np.exp(-0.5 * np.sum(d * d, axis=-1) / w2)

    def gradient(x):
        d = _as_state(x) - c
        return -(d / w2) * value(x)[..., None]

    def hessian(x):
        d = _as_state(x) - c
        v = value(x)[..., None, None]
        outer = np.einsum("...i,...j->...ij", d, d) / (w2 * w2)
        return v * (outer - np.eye(n) / w2)

    return EnergyFunction(n, value, gradient, hessian, name=name)


# ---------------------------------------------------------------------------
# finite-difference oracles
# ---------------------------------------------------------------------------


def fd_gradient(fn: Callable[[Array], Array], x, step: float = FD_STEP) -> Array:
    """Central-difference gradient of a scalar batch map, step ``step*(1+|x_i|)``."""
    x = _as_state(x)
    n = x.shape[-1]
    out = []
    for i in range(n):
        h = step * (1.0 + np.abs(x[..., i]))
        e = np.zeros_like(x)
        e[..., i] = h
        out.append((fn(x + e) - fn(x - e)) / (2.0 * h))
    return np.stack(out, axis=-1)


def fd_jacobian(fn: Callable[[Array], Array], x, step: float = FD_STEP) -> Array:
    """Central-difference Jacobian ``d fn_i / d x_j`` of a vector batch map."""
    x = _as_state(x)
    n = x.shape[-1]
    cols = []
    for j in range(n):
        h = step * (1.0 + np.abs(x[..., j]))
        e = np.zeros_like(x)
        e[..., j] = h
        cols.append((fn(x + e) - fn(x - e)) / (2.0 * h)[..., None])
    return np.stack(cols, axis=-1)


def _rel_err(approx: Array, exact: Array) -> float:
    approx = np.asarray(approx)
    exact = np.asarray(exact)
    scale = 1.0 + np.abs(exact)
    return float(np.max(np.abs(approx - exact) / scale)) if exact.size else 0.0


def derivative_residuals(f: EnergyFunction, probes) -> dict:
    """Max relative disagreement of closed-form derivatives with finite differences."""
    X = np.atleast_2d(_as_state(probes))
    g = f.gradient(X)
    Hs = f.hessian(X)
    return {
        "gradient": _rel_err(fd_gradient(f.value, X), g),
        "hessian": _rel_err(fd_jacobian(f.gradient, X), Hs),
        "hessian_symmetry": float(np.max(np.abs(Hs - np.swapaxes(Hs, -1, -2)))),
    }


# ---------------------------------------------------------------------------
# control laws
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlLaw:
    """Input ``u`` fed to a controlled model: zero, constant or state feedback."""

    kind: str
    dim: int
    value: Optional[Array] = None
    feedback: Optional[StateMap] = None

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "state_feedback"):
            raise ModelError(f"unknown control kind {self.kind!r}")

    @classmethod
    def zero(cls, m: int) -> "ControlLaw":
        return cls("zero", int(m))

    @classmethod
    def constant(cls, u) -> "ControlLaw":
        u = np.array(u, dtype=float).ravel()
        u.setflags(write=False)
        return cls("constant", u.size, value=u)

    @classmethod
    def state_feedback(cls, phi: StateMap, m: int) -> "ControlLaw":
        return cls("state_feedback", int(m), feedback=phi)

    def __call__(self, x) -> Array:
        x = _as_state(x)
        batch = x.shape[:-1]
        if self.kind == "zero":
            return np.zeros(batch + (self.dim,))
        if self.kind == "constant":
            return np.broadcast_to(self.value, batch + (self.dim,))
        u = np.asarray(self.feedback(x), dtype=float)
        if self.dim == 1 and u.shape == batch:
            u = u[..., None]
        return u


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lo_i, hi_i]``."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.ravel(self.lo))
        hi = tuple(float(v) for v in np.ravel(self.hi))
        if len(lo) != len(hi) or any(h <= l for l, h in zip(lo, hi)):
            raise ModelError("box needs lo < hi in every coordinate")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def center(self) -> Array:
        return 0.5 * (np.array(self.lo) + np.array(self.hi))

    def contains(self, x) -> Array:
        x = _as_state(x)
        return np.all((x >= np.array(self.lo)) & (x <= np.array(self.hi)), axis=-1)

    def sample(self, n: int, seed: int = 0) -> Array:
        rng = np.random.default_rng(seed)
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}


class ControlledSde:
    """Control-affine Itô diffusion ``dX = [mu(X) + G(X) u] dt + sigma(X) dW``.

    Parameters
    ----------
    n, d, m : int
        State, noise and input dimensions.
    drift : callable or array
        Autonomous drift ``mu``.
    sigma : callable or array
        Noise map of shape ``(n, d)``.
    input_map : callable or array, optional
        ``G`` of shape ``(n, m)``; required when ``m > 0``.
    output_map : callable, optional
        Output ``h(x)`` of shape ``(m,)``.
    storage : EnergyFunction, optional
        Storage (Lyapunov) function used by passivity checks.
    admissible : callable, optional
        Boolean batch predicate; states outside are excluded from sampling.
    linear : (A, x_e), optional
        Declares the drift to be exactly ``A (x - x_e)`` (additive noise).
    """

    is_sphs = False

    def __init__(
        self,
        n: int,
        d: int,
        drift,
        sigma,
        m: int = 0,
        input_map=None,
        output_map: Optional[StateMap] = None,
        storage: Optional[EnergyFunction] = None,
        admissible: Optional[Callable[[Array], Array]] = None,
        linear: Optional[tuple] = None,
        name: str = "",
        probe=None,
    ):
        self.n, self.d, self.m = int(n), int(d), int(m)
        if self.n < 1 or self.d < 1 or self.m < 0:
            raise ModelError("dimensions must satisfy n >= 1, d >= 1, m >= 0")
        self._drift0 = as_field(drift, (self.n,))
        self._sigma = as_field(sigma, (self.n, self.d))
        if self.m > 0 and input_map is None:
            raise ModelError("input_map is required when m > 0")
        self._input = as_field(input_map, (self.n, self.m)) if self.m > 0 else None
        self._output = output_map
        self.storage = storage
        self.admissible = admissible
        self.linear = None
        if linear is not None:
            A, xe = linear
            self.linear = (np.array(A, dtype=float), np.array(xe, dtype=float).ravel())
        self.name = name
        self._check_shapes(probe)

    def _check_shapes(self, probe):
        x = np.zeros(self.n) if probe is None else _as_state(probe)
        if x.shape != (self.n,):
            raise ModelError(f"probe point must have shape ({self.n},)")
        if np.shape(self._drift0(x)) != (self.n,):
            raise ModelError(f"drift must return shape ({self.n},), got {np.shape(self._drift0(x))}")
        if np.shape(self._sigma(x)) != (self.n, self.d):
            raise ModelError(f"sigma must return shape ({self.n}, {self.d}), got {np.shape(self._sigma(x))}")
        if self._input is not None and np.shape(self._input(x)) != (self.n, self.m):
            raise ModelError(f"input map must return shape ({self.n}, {self.m}), got {np.shape(self._input(x))}")
        if self.storage is not None and self.storage.dim != self.n:
            raise ModelError(f"storage function dim {self.storage.dim} != state dim {self.n}")
        if self._output is not None and self.m > 0 and np.shape(self._output(x)) != (self.m,):
            raise ModelError(f"output map must return shape ({self.m},)")

    # -- maps -------------------------------------------------------------
    def drift0(self, x) -> Array:
        return self._drift0(_as_state(x))

    def input_map(self, x) -> Array:
        x = _as_state(x)
        if self._input is None:
            return np.zeros(x.shape[:-1] + (self.n, 0))
        return self._input(x)

    def sigma(self, x) -> Array:
        return self._sigma(_as_state(x))

    def diffusion(self, x) -> Array:
        """``Sigma = sigma sigma^T`` of shape ``(..., n, n)``."""
        s = self.sigma(x)
        return np.einsum("...ik,...jk->...ij", s, s)

    def drift(self, x, u=None) -> Array:
        x = _as_state(x)
        mu = self.drift0(x)
        if u is None or self.m == 0:
            return mu
        return mu + matvec(self.input_map(x), np.asarray(u, dtype=float))

    def output(self, x) -> Array:
        x = _as_state(x)
        if self.m == 0:
            return np.zeros(x.shape[:-1] + (0,))
        if self._output is None:
            raise ModelError("model has no output map")
        return self._output(x)

    def is_admissible(self, x) -> Array:
        x = _as_state(x)
        ok = np.all(np.isfinite(x), axis=-1)
        if self.admissible is not None:
            ok &= np.asarray(self.admissible(x), dtype=bool)
        return ok


class SphsModel(ControlledSde):
    """Stochastic port-Hamiltonian system.

    ``J`` (antisymmetric), ``R`` (symmetric PSD), ``g`` and ``sigma`` may be
    constant arrays or batch-aware callables.  Dimensions are checked at
    construction; matrix properties are probed by :func:`validate`.
    """

    is_sphs = True

    def __init__(
        self,
        J,
        R,
        g,
        sigma,
        hamiltonian: EnergyFunction,
        n: Optional[int] = None,
        m: Optional[int] = None,
        d: Optional[int] = None,
        admissible=None,
        linear=None,
        name: str = "",
        probe=None,
    ):
        n = hamiltonian.dim if n is None else int(n)
        if hamiltonian.dim != n:
            raise ModelError(f"Hamiltonian dim {hamiltonian.dim} != n = {n}")
        if m is None:
            m = 0 if g is None else (np.shape(g)[1] if not callable(g) else None)
            if m is None:
                x0 = np.zeros(n) if probe is None else _as_state(probe)
                m = np.shape(g(x0))[1]
        if d is None:
            if callable(sigma):
                x0 = np.zeros(n) if probe is None else _as_state(probe)
                d = np.shape(sigma(x0))[1]
            else:
                d = np.atleast_2d(np.array(sigma, dtype=float)).reshape(n, -1).shape[1]
        self.J = as_field(J, (n, n))
        self.R = as_field(R, (n, n))
        self.g = as_field(g, (n, int(m))) if int(m) > 0 else None
        self.hamiltonian = hamiltonian
        x0 = np.zeros(n) if probe is None else _as_state(probe)
        for label, M in (("J", self.J), ("R", self.R)):
            if np.shape(M(x0)) != (n, n):
                raise ModelError(f"{label} must return shape ({n}, {n}), got {np.shape(M(x0))}")

        def drift0(x):
            return matvec(self.J(x) - self.R(x), hamiltonian.gradient(x))

        def output(x):
            return matvec(np.swapaxes(self.g(x), -1, -2), hamiltonian.gradient(x))

        super().__init__(
            n,
            d,
            drift0,
            sigma,
            m=int(m),
            input_map=self.g,
            output_map=output if int(m) > 0 else None,
            storage=hamiltonian,
            admissible=admissible,
            linear=linear,
            name=name,
            probe=probe,
        )

    def structure(self, x) -> Array:
        """``J(x) - R(x)``."""
        return self.J(x) - self.R(x)

    def replace(self, **changes) -> "SphsModel":
        """Copy with some constructor arguments replaced."""
        kw = dict(
            J=self.J,
            R=self.R,
            g=self.g if self.g is not None else np.zeros((self.n, 0)),
            sigma=self._sigma,
            hamiltonian=self.hamiltonian,
            n=self.n,
            m=self.m,
            d=self.d,
            admissible=self.admissible,
            linear=self.linear,
            name=self.name,
        )
        kw.update(changes)
        if kw.get("g") is None:
            kw["g"] = np.zeros((kw["n"], 0))
            kw["m"] = 0
        return SphsModel(**kw)


def output(model: ControlledSde, x) -> Array:
    """Port output ``y = g(x)^T dH(x)`` (or the declared output map)."""
    return model.output(x)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass
class Violation:
    check: str
    max_residual: float
    tolerance: float

    def to_dict(self) -> dict:
        return {"check": self.check, "max_residual": self.max_residual, "tolerance": self.tolerance}


@dataclass
class ValidationReport:
    """Probe-point validation outcome; an empty ``violations`` list means pass."""

    n_probes: int
    residuals: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "n_probes": self.n_probes,
            "residuals": dict(self.residuals),
            "violations": [v.to_dict() for v in self.violations],
        }


def validate(model: ControlledSde, probes: Sequence) -> ValidationReport:
    """Probe structural invariants and derivative consistency of ``model``."""
    X = np.atleast_2d(_as_state(probes))
    if X.shape[0] == 0:
        raise ModelError("validate needs at least one probe point")
    X = X[model.is_admissible(X)]
    report = ValidationReport(n_probes=int(X.shape[0]))
    checks = []
    if model.is_sphs and X.shape[0]:
        J = model.J(X)
        R = model.R(X)
        checks.append(("J_antisymmetry", float(np.max(np.abs(J + np.swapaxes(J, -1, -2)))), ANTISYMMETRY_TOL))
        checks.append(("R_symmetry", float(np.max(np.abs(R - np.swapaxes(R, -1, -2)))), SYMMETRY_TOL))
        Rs = 0.5 * (R + np.swapaxes(R, -1, -2))
        min_eig = float(np.min(np.linalg.eigvalsh(Rs)))
        checks.append(("R_psd", max(0.0, -min_eig), PSD_TOL))
    if model.storage is not None and X.shape[0]:
        res = derivative_residuals(model.storage, X)
        checks.append(("gradient_fd", res["gradient"], FD_REL_TOL))
        checks.append(("hessian_fd", res["hessian"], FD_REL_TOL))
        checks.append(("hessian_symmetry", res["hessian_symmetry"], SYMMETRY_TOL))
    for name, value, tol in checks:
        report.residuals[name] = value
        if not value <= tol:
            report.violations.append(Violation(name, value, tol))
    return report
