"""Classical, KYP and ultimate stochastic passivity checks.

All certificates here are sampling based: they report what holds on the
probed points and shells, nothing more.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm, qmc

from .generator import GeneratorContext, apply_generator
from .model import ControlLaw, ControlledSde, EnergyFunction, ModelError

MIN_SHELL_SAMPLES = 64
ZERO_TOL = 1e-12
KYP_TOL = 1e-12


# ---------------------------------------------------------------------------
# classical passivity
# ---------------------------------------------------------------------------


@dataclass
class PassReport:
    eq9_holds: np.ndarray
    supply_holds: np.ndarray
    eq9_margin: np.ndarray
    supply_margin: np.ndarray
    certificate: str = "sampling"

    @property
    def passed(self) -> bool:
        return bool(np.all(self.eq9_holds) and np.all(self.supply_holds))

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "certificate": self.certificate,
            "n_samples": int(self.eq9_holds.size),
            "eq9_violations": int(np.sum(~self.eq9_holds)),
            "supply_violations": int(np.sum(~self.supply_holds)),
            "min_eq9_margin": float(np.min(self.eq9_margin)),
            "min_supply_margin": float(np.min(self.supply_margin)),
        }


def _split_samples(samples, n: int, m: int):
    if isinstance(samples, tuple) and len(samples) == 2 and np.ndim(samples[0]) == 2:
        X, U = samples
    else:
        samples = list(samples)
        if not samples:
            raise ValueError("need at least one sample")
        X = [s[0] for s in samples]
        U = [s[1] if s[1] is not None else np.zeros(m) for s in samples]
    X = np.asarray(X, dtype=float).reshape(-1, n)
    U = np.asarray(U, dtype=float).reshape(len(X), m)
    return X, U


def check_classical_passivity(ctx: GeneratorContext, samples) -> PassReport:
    """Check ``2 dH^T R dH >= Tr[hess H Sigma]`` and ``L H <= y^T u`` on samples.

    ``samples`` is a sequence of ``(x, u)`` pairs or a tuple of arrays
    ``(X, U)``.  The input ``u`` of each sample replaces the context's law.
    """
    model = ctx.model
    if not model.is_sphs:
        raise ModelError("classical passivity condition needs an SPHS model")
    X, U = _split_samples(samples, model.n, model.m)
    H = model.hamiltonian
    gH = H.gradient(X)
    lhs = 2.0 * np.einsum("ki,kij,kj->k", gH, model.R(X), gH)
    rhs = np.einsum("kij,kji->k", H.hessian(X), model.diffusion(X))
    eq9_margin = lhs - rhs
    LH = np.empty(len(X))
    supply = np.empty(len(X))
    for k in range(len(X)):
        c = GeneratorContext(model, ControlLaw.constant(U[k]) if model.m else None)
        LH[k] = apply_generator(c, H, X[k])
        supply[k] = c.supply_rate(X[k])
    supply_margin = supply - LH
    tol = ZERO_TOL * (1.0 + np.abs(lhs) + np.abs(rhs))
    return PassReport(eq9_margin >= -tol, supply_margin >= -tol, eq9_margin, supply_margin)


# ---------------------------------------------------------------------------
# KYP
# ---------------------------------------------------------------------------


@dataclass
class KypReport:
    dissipation_holds: np.ndarray
    output_residual: np.ndarray
    l0: np.ndarray

    @property
    def output_holds(self) -> np.ndarray:
        return self.output_residual <= KYP_TOL

    @property
    def passed(self) -> bool:
        return bool(np.all(self.dissipation_holds) and np.all(self.output_holds))

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "dissipation_violations": int(np.sum(~self.dissipation_holds)),
            "max_output_residual": float(np.max(self.output_residual)),
            "max_L0V": float(np.max(self.l0)),
        }


def check_kyp(model: ControlledSde, samples, V: Optional[EnergyFunction] = None) -> KypReport:
    """KYP conditions ``L0 V <= 0`` and ``dV^T G = h^T`` on sample states."""
    if not getattr(model, "control_affine", True):
        raise ModelError("KYP check requires a control-affine model")
    V = model.storage if V is None else V
    if V is None:
        raise ModelError("no storage function supplied")
    X = np.asarray(samples, dtype=float).reshape(-1, model.n)
    l0 = apply_generator(GeneratorContext(model), V, X)
    if model.m:
        lhs = np.einsum("ki,kij->kj", V.gradient(X), model.input_map(X))
        resid = np.max(np.abs(lhs - model.output(X)), axis=-1)
    else:
        resid = np.zeros(len(X))
    return KypReport(l0 <= ZERO_TOL * (1.0 + np.abs(l0)), resid, l0)


# ---------------------------------------------------------------------------
# shells
# ---------------------------------------------------------------------------


def sphere_directions(n: int, n_samples: int, seed: int = 0) -> np.ndarray:
    """Deterministic quasi-uniform unit vectors in ``R^n``.

    ``n = 1`` gives ``{-1, +1}``; ``n = 2`` gives equally spaced angles with a
    seeded offset; higher dimensions map a scrambled Sobol sequence through
    the Gaussian inverse CDF and normalise.
    """
    if n == 1:
        return np.array([[-1.0], [1.0]])
    if n == 2:
        offset = np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi / n_samples)
        theta = offset + 2.0 * np.pi * np.arange(n_samples) / n_samples
        return np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    sob = qmc.Sobol(d=n, scramble=True, seed=seed)
    m = int(np.ceil(np.log2(n_samples)))
    U = sob.random_base2(m)[:n_samples]
    Z = norm.ppf(np.clip(U, 1e-12, 1 - 1e-12))
    return Z / np.linalg.norm(Z, axis=1, keepdims=True)


def _shell_margin(ctx: GeneratorContext, f: EnergyFunction, X: np.ndarray) -> np.ndarray:
    return apply_generator(ctx, f, X) - ctx.supply_rate(X)


def shell_values(ctx, f, x_e, radius, n_samples=256, seed=0):
    """``L f - y^T u`` on admissible shell points and the skipped fraction."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if n_samples < MIN_SHELL_SAMPLES:
        raise ValueError(f"need at least {MIN_SHELL_SAMPLES} shell samples")
    x_e = np.asarray(x_e, dtype=float).ravel()
    X = x_e + radius * sphere_directions(ctx.n, n_samples, seed)
    ok = ctx.model.is_admissible(X)
    skipped = 1.0 - float(np.mean(ok))
    vals = _shell_margin(ctx, f, X[ok]) if np.any(ok) else np.array([])
    return vals, skipped


def shell_supremum(ctx: GeneratorContext, f: EnergyFunction, x_e, radius: float, n_samples: int = 256, seed: int = 0) -> float:
    """Max of ``L f(x) - y(x)^T u(x)`` over quasi-uniform points with ``|x - x_e| = radius``."""
    vals, _ = shell_values(ctx, f, x_e, radius, n_samples, seed)
    if vals.size == 0:
        return float("nan")
    return float(np.max(vals))


@dataclass(frozen=True)
class Verdict:
    kind: str
    C: Optional[float] = None
    delta: Optional[float] = None

    @property
    def ultimately_passive(self) -> bool:
        return self.kind in ("passive_everywhere", "ultimately_passive", "strictly_ultimately_passive")

    @property
    def strict(self) -> bool:
        return self.kind == "strictly_ultimately_passive" or (self.kind == "passive_everywhere" and self.delta is not None)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "C": self.C, "delta": self.delta}


@dataclass
class ShellReport:
    center: np.ndarray
    radii: list
    sup_raw: list
    sup_normalized: list
    skipped_fraction: list
    eps: float
    verdict: Verdict
    interior_max: Optional[float] = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "center": np.asarray(self.center).tolist(),
            "radii": list(self.radii),
            "sup_raw": list(self.sup_raw),
            "sup_normalized": list(self.sup_normalized),
            "skipped_fraction": list(self.skipped_fraction),
            "eps": self.eps,
            "interior_max": self.interior_max,
            "verdict": self.verdict.to_dict(),
        }


def classify_ultimate_passivity(
    ctx: GeneratorContext,
    f: EnergyFunction,
    x_e,
    radii: Sequence[float],
    eps: float,
    n_samples: int = 256,
    seed: int = 0,
    n_interior: int = 512,
) -> ShellReport:
    """Classify passivity of ``f`` outside balls around ``x_e`` from shell suprema.

    ``strictly_ultimately_passive(C, delta)``: for every sampled radius
    ``r >= C`` the shell supremum is ``<= -eps`` and ``<= -delta r^2``, with
    ``C`` the smallest sampled radius for which this holds.
    ``ultimately_passive(C)``: only ``sup <= 0`` for ``r >= C``.
    ``passive_everywhere``: ``sup <= 0`` on all shells and on interior samples.
    """
    radii = [float(r) for r in radii]
    if not radii or any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be a non-empty increasing list")
    if eps <= 0:
        raise ValueError("eps must be positive")
    x_e = np.asarray(x_e, dtype=float).ravel()
    raw, normalized, skipped = [], [], []
    for r in radii:
        vals, skip = shell_values(ctx, f, x_e, r, n_samples, seed)
        s = float(np.max(vals)) if vals.size else float("nan")
        raw.append(s)
        normalized.append(s / r**2)
        skipped.append(skip)
    raw_a = np.array(raw)
    norm_a = np.array(normalized)
    tol = ZERO_TOL * (1.0 + np.abs(raw_a))
    valid = np.isfinite(raw_a)

    def first_tail(mask):
        for k in range(len(radii)):
            if np.all(mask[k:] & valid[k:]):
                return k
        return None

    k_strict = first_tail((raw_a <= -eps) & (norm_a < 0))
    k_weak = first_tail(raw_a <= tol)

    # interior: uniform points in the smallest ball plus the centre
    rng = np.random.default_rng(seed)
    n = ctx.n
    Z = rng.standard_normal((n_interior, n))
    Z /= np.linalg.norm(Z, axis=1, keepdims=True)
    rad = radii[0] * rng.uniform(size=(n_interior, 1)) ** (1.0 / n)
    Xi = np.vstack([x_e[None, :], x_e + rad * Z])
    Xi = Xi[ctx.model.is_admissible(Xi)]
    interior = _shell_margin(ctx, f, Xi) if len(Xi) else np.array([0.0])
    interior_max = float(np.max(interior))

    C = delta = None
    if k_strict is not None:
        C = radii[k_strict]
        delta = float(np.min(-norm_a[k_strict:]))
    if k_weak == 0 and interior_max <= ZERO_TOL * (1.0 + abs(interior_max)):
        verdict = Verdict("passive_everywhere", C, delta)
    elif k_strict is not None:
        verdict = Verdict("strictly_ultimately_passive", C, delta)
    elif k_weak is not None:
        verdict = Verdict("ultimately_passive", radii[k_weak])
    else:
        verdict = Verdict("fails")
    return ShellReport(x_e, radii, raw, normalized, skipped, float(eps), verdict, interior_max)
