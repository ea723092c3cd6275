"""Command-line front end: ``sphs run CONFIG [OUT]``.

Exit status is 0 when every requested check passes, 2 when a check fails
and 1 on usage or configuration errors.  ``report.json`` depends only on the
configuration and seed; wall-clock data goes to ``metadata.json``.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from . import config as cfgmod
from .casimir import (
    check_interconnection_casimir,
    check_strong_casimir,
    check_weak_casimir,
    coupling_power,
    interconnect,
    reduce_on_casimir,
    reduction_conditions,
)
from .config import ConfigError, get
from .ergodics import dynkin_residual, gaussian_density, histogram_to_csv, occupation_measure
from .fokker_planck import (
    conservation_audit,
    density_to_binary,
    density_to_csv,
    infinitesimal_invariance,
    markov_generator,
    stationary_solve,
    WeightedInnerProduct,
)
from .generator import GeneratorContext, apply_generator
from .model import Box, ControlLaw, ControlledSde, EnergyFunction, ModelError, SphsModel, gaussian_bump, quadratic_hamiltonian, validate
from .passivity import check_classical_passivity, classify_ultimate_passivity
from .scenarios import (
    RlcParams,
    casimir_3d,
    counterexample,
    interconnection_example,
    ou,
    pendulum,
    pendulum_plans,
    rlc,
    rlc_generator_at_equilibrium,
    rlc_generator_closed_form,
    rlc_shaped,
    shaped_pendulum,
)
from .sde import LinearModelView, ensemble_to_binary, ensemble_to_csv, simulate, stationary_covariance
from .shaping import ShapingError, assemble_shaped, check_conditions

REPORT_VERSION = 1
N_PROBES = 1000


# ---------------------------------------------------------------------------
# scenario assembly
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    model: ControlledSde
    storage: EnergyFunction
    x_e: np.ndarray
    control: Optional[ControlLaw] = None
    original: Optional[SphsModel] = None
    plan: object = None
    linear: Optional[LinearModelView] = None
    closed_form: list = field(default_factory=list)
    interconnection: object = None
    params: dict = field(default_factory=dict)

    def context(self) -> GeneratorContext:
        return GeneratorContext(self.model, self.control)


def _params(cfg: dict, allowed: dict) -> dict:
    given = get(cfg, "model.params", {}) or {}
    for k in given:
        if k not in allowed:
            raise ConfigError(f"model.params.{k}", f"unknown parameter (known: {', '.join(sorted(allowed)) or 'none'})")
    out = dict(allowed)
    out.update(given)
    return out


def _pendulum_generator_check(sc: Scenario, rng) -> Callable:
    def check():
        X = sc.x_e + rng.uniform(-5.0, 5.0, size=(N_PROBES, 2))
        got = apply_generator(sc.context(), sc.storage, X)
        err = float(np.max(np.abs(got - (1.0 - X[:, 1] ** 2))))
        return "generator_closed_form", {"max_abs_error": err, "tolerance": 1e-10, "passed": err <= 1e-10}

    return check


def _rlc_checks(sc: Scenario, p: RlcParams, rng) -> list:
    def at_equilibrium():
        route_a = float(apply_generator(sc.context(), sc.storage, p.x_e))
        route_b = float(rlc_generator_at_equilibrium(p))
        rel = abs(route_a - route_b) / max(abs(route_b), 1e-300)
        return "generator_at_equilibrium", {
            "generator_route": route_a,
            "closed_form": route_b,
            "rel_error": rel,
            "tolerance": 1e-10,
            "passed": rel <= 1e-10,
        }

    def along_domain():
        X = p.x_e + rng.uniform(-3.0, 3.0, size=(N_PROBES, 2))
        X = X[sc.model.is_admissible(X)]
        a = apply_generator(sc.context(), sc.storage, X)
        b = rlc_generator_closed_form(p, X)
        rel = float(np.max(np.abs(a - b) / (1.0 + np.abs(b))))
        return "generator_closed_form", {"n_probes": int(len(X)), "max_rel_error": rel, "tolerance": 1e-10, "passed": rel <= 1e-10}

    def hessian_at_equilibrium():
        eig = np.linalg.eigvalsh(sc.storage.hessian(p.x_e))
        grad = float(np.max(np.abs(sc.storage.gradient(p.x_e))))
        return "minimum_at_equilibrium", {
            "gradient_norm": grad,
            "hessian_eigenvalues": eig.tolist(),
            "passed": grad <= 1e-10 and float(eig.min()) > 0,
        }

    return [at_equilibrium, along_domain, hessian_at_equilibrium]


def _closed_loop(plant: SphsModel, plan) -> ControlledSde:
    """Autonomous closed loop: the shaped SPHS when matching holds, else the
    literal feedback drift with ``H + H_a`` as storage."""
    X = np.random.default_rng(0).uniform(-5.0, 5.0, size=(256, plant.n)) + plan.x_e
    try:
        return assemble_shaped(plant, plan, X).model
    except ShapingError:
        ctx = GeneratorContext(plant, plan.control())
        storage = plant.hamiltonian + plan.H_a if plan.H_a is not None else None
        return ControlledSde(plant.n, plant.d, ctx.drift, plant.sigma, storage=storage, name=f"{plant.name}_{plan.name}")


def _matrix(cfg, key, n, params, default=None):
    val = get(cfg, key)
    if val is None:
        if default is None:
            raise ConfigError(key, "missing")
        return default
    return cfgmod.matrix_field(val, n, params, key)


def _inline(cfg: dict) -> Scenario:
    spec = cfg["model"]["inline"]
    n = spec.get("n")
    if not isinstance(n, int) or n < 1:
        raise ConfigError("model.inline.n", "positive integer required")
    params = spec.get("params", {})
    if not isinstance(params, dict) or not all(cfgmod._is_number(v) for v in params.values()):
        raise ConfigError("model.inline.params", "must map names to numbers")
    x_e = np.array(get(cfg, "equilibrium", [0.0] * n), dtype=float).ravel()
    sigma = _matrix(cfg, "model.inline.sigma", n, params)
    if "drift" in spec:
        drift = cfgmod.vector_field(spec["drift"], n, params, "model.inline.drift")
        if "storage" not in spec:
            raise ConfigError("model.inline.storage", "missing (required with 'drift')")
        storage = cfgmod.energy_from_expr(spec["storage"], n, params, name="storage")
        d = np.shape(sigma(x_e) if callable(sigma) else sigma)[1]
        model = ControlledSde(n, d, drift, sigma, storage=storage, name=cfg.get("name", "inline"))
        return Scenario(model, storage, x_e)
    H = spec.get("hamiltonian")
    if isinstance(H, dict):
        if "Lambda" not in H:
            raise ConfigError("model.inline.hamiltonian.Lambda", "missing")
        center = H.get("center", x_e.tolist())
        hamiltonian = quadratic_hamiltonian(H["Lambda"], center)
    elif isinstance(H, str):
        hamiltonian = cfgmod.energy_from_expr(H, n, params, name="H")
    else:
        raise ConfigError("model.inline.hamiltonian", "expression string or {Lambda, center} required")
    J = _matrix(cfg, "model.inline.J", n, params, np.zeros((n, n)))
    R = _matrix(cfg, "model.inline.R", n, params, np.zeros((n, n)))
    g = get(cfg, "model.inline.g")
    g = None if g is None else cfgmod.matrix_field(g, n, params, "model.inline.g")
    linear = None
    if all(not callable(M) for M in (J, R, sigma)) and isinstance(H, dict):
        linear = ((np.asarray(J) - np.asarray(R)) @ np.asarray(H["Lambda"], dtype=float), np.asarray(hamiltonian.center))
    model = SphsModel(J, R, g, sigma, hamiltonian, n=n, linear=linear, name=cfg.get("name", "inline"), probe=x_e)
    sc = Scenario(model, hamiltonian, x_e)
    if linear is not None:
        sc.linear = LinearModelView.from_model(model)
    return sc


def build_scenario(cfg: dict) -> Scenario:
    try:
        return _build_scenario(cfg)
    except ConfigError:
        raise
    except (ModelError, cfgmod.ExprError) as exc:
        raise ConfigError("model", str(exc)) from None


def _build_scenario(cfg: dict) -> Scenario:
    if "inline" in cfg["model"]:
        return _inline(cfg)
    name = cfg["model"]["builtin"]
    rng = np.random.default_rng(int(cfg.get("seed", 0)) + 3)
    if name in ("pendulum", "pendulum_shaped"):
        p = _params(cfg, {"g_grav": 9.81, "noise": 1.0, "x1e": 0.0})
        x_e = np.array([p["x1e"], 0.0])
        if name == "pendulum_shaped":
            m = shaped_pendulum(p["x1e"], p["noise"])
            sc = Scenario(m, m.hamiltonian, x_e, linear=LinearModelView.from_model(m), params=p)
            sc.closed_form.append(_pendulum_generator_check(sc, rng))
            return sc
        plant = pendulum(p["g_grav"], p["noise"])
        plan_name = get(cfg, "shaping.plan")
        if plan_name is None:
            return Scenario(plant, plant.hamiltonian, x_e, params=p)
        plans = pendulum_plans(p["x1e"], p["g_grav"])
        if plan_name not in plans:
            raise ConfigError("shaping.plan", f"unknown plan {plan_name!r} (known: {', '.join(plans)})")
        plan = plans[plan_name]
        sc = Scenario(_closed_loop(plant, plan), plant.hamiltonian + plan.H_a, x_e, None, plant, plan, params=p)
        if plan_name == "full":
            sc.linear = LinearModelView.from_model(shaped_pendulum(p["x1e"], p["noise"]))
            sc.closed_form.append(_pendulum_generator_check(sc, rng))
        return sc
    if name == "counterexample":
        _params(cfg, {})
        m = counterexample()
        return Scenario(m, m.storage, np.zeros(1))
    if name in ("rlc", "rlc_shaped"):
        defaults = RlcParams().to_dict()
        defaults.pop("c2")
        p = RlcParams(**{k: float(v) for k, v in _params(cfg, defaults).items()})
        if name == "rlc":
            m = rlc(p)
            return Scenario(m, m.hamiltonian, np.zeros(2), params=p.to_dict())
        m = rlc_shaped(p)
        sc = Scenario(m, m.hamiltonian, p.x_e, params=p.to_dict())
        sc.closed_form.extend(_rlc_checks(sc, p, rng))
        return sc
    if name == "ou":
        p = _params(cfg, {"A": [[-1.0, 1.0], [-1.0, -1.0]], "sigma": None})
        try:
            m = ou(p["A"], p["sigma"])
        except ValueError as exc:
            raise ConfigError("model.params.A", str(exc)) from None
        return Scenario(m, m.hamiltonian, np.zeros(m.n), linear=LinearModelView.from_model(m), params=p)
    if name == "casimir3d":
        p = _params(cfg, {"third_noise_row": True})
        m = casimir_3d(bool(p["third_noise_row"]))
        return Scenario(m, m.hamiltonian, np.zeros(3), params=p)
    if name == "interconnection":
        p = _params(cfg, {"x1e": 0.0, "g_grav": 9.81, "noise": 1.0, "noise_c": 1.0, "F_index": 0})
        ex = interconnection_example(p["x1e"], p["g_grav"], p["noise"], p["noise_c"], int(p["F_index"]))
        sys_ = interconnect(ex.plant, ex.controller)
        x_e = np.concatenate([ex.x_e, ex.S.inverse(np.atleast_1d(ex.F(ex.x_e) + ex.c))])
        sc = Scenario(sys_, sys_.hamiltonian, x_e, sys_.external_control(), params=p)
        sc.interconnection = ex
        return sc
    known = "pendulum, pendulum_shaped, counterexample, rlc, rlc_shaped, ou, casimir3d, interconnection"
    raise ConfigError("model.builtin", f"unknown built-in {name!r} (known: {known})")


# ---------------------------------------------------------------------------
# analyses
# ---------------------------------------------------------------------------


def _box(cfg: dict, n: int) -> Box:
    lo = np.broadcast_to(np.asarray(get(cfg, "domain.lo"), dtype=float), (n,))
    hi = np.broadcast_to(np.asarray(get(cfg, "domain.hi"), dtype=float), (n,))
    return Box(tuple(lo), tuple(hi))


def _probes(cfg: dict, sc: Scenario, rng) -> np.ndarray:
    n = sc.model.n
    if cfgmod.has(cfg, "domain.lo"):
        b = _box(cfg, n)
        return rng.uniform(b.lo, b.hi, size=(N_PROBES, n))
    return sc.x_e + rng.standard_normal((N_PROBES, n))


def _as_list(v) -> list:
    return list(v) if isinstance(v, list) else [v]


class Runner:
    def __init__(self, cfg: dict, out: Path, fmt: str, threads: int):
        self.cfg = cfg
        self.out = out
        self.fmt = fmt
        self.threads = threads
        self.seed = int(cfg.get("seed", 0))
        self.sc = build_scenario(cfg)
        self.ensemble = None
        self.files: list = []

    def rng(self, offset: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, offset])

    def _file(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def _formats(self) -> tuple:
        return {"csv": ("csv",), "binary": ("binary",), "both": ("csv", "binary")}[self.fmt]

    # -- individual analyses ---------------------------------------------
    def validate(self) -> dict:
        return validate(self.sc.model, _probes(self.cfg, self.sc, self.rng(1))).to_dict()

    def passivity(self) -> dict:
        sc, cfg = self.sc, self.cfg
        require = get(cfg, "passivity.require", "strict")
        radii = [float(r) for r in _as_list(get(cfg, "passivity.radii"))]
        center = np.asarray(get(cfg, "passivity.center", sc.x_e.tolist()), dtype=float)
        n_samples = int(get(cfg, "passivity.n_samples", 256))
        shells = []
        ok = True
        for eps in _as_list(get(cfg, "passivity.eps")):
            rep = classify_ultimate_passivity(sc.context(), sc.storage, center, radii, float(eps), n_samples, self.seed + 2)
            v = rep.verdict
            holds = {"strict": v.strict, "ultimate": v.ultimately_passive, "none": True}[require]
            ok &= bool(holds)
            shells.append(dict(rep.to_dict(), requirement_met=bool(holds)))
        out = {"require": require, "shells": shells}
        if sc.model.is_sphs and sc.control is None:
            X = _probes(cfg, sc, self.rng(4))[:200]
            X = X[sc.model.is_admissible(X)]
            pr = check_classical_passivity(sc.context(), (X, np.zeros((len(X), sc.model.m))))
            out["classical"] = {
                "fraction_satisfied": float(np.mean(pr.eq9_holds)) if len(X) else None,
                "min_margin": float(np.min(pr.eq9_margin)) if len(X) else None,
            }
        checks = {}
        for fn in sc.closed_form:
            name, res = fn()
            checks[name] = res
            ok &= bool(res["passed"])
        if checks:
            out["closed_form"] = checks
        out["passed"] = bool(ok)
        return out

    def shaping_check(self) -> dict:
        sc, cfg = self.sc, self.cfg
        if sc.plan is None:
            raise ConfigError("shaping.plan", "the selected model has no shaping plan")
        X = _probes(cfg, sc, self.rng(5))
        shell = None
        if get(cfg, "shaping.check_ultimate_passivity", True):
            shell = {
                "radii": _as_list(get(cfg, "passivity.radii", [2.0, 4.0, 8.0])),
                "eps": float(_as_list(get(cfg, "passivity.eps", [0.1]))[0]),
                "seed": self.seed + 2,
            }
        rep = check_conditions(sc.original, sc.plan, X, shell, sc.linear)
        return dict(rep.to_dict(), plan=sc.plan.name)

    def casimir_check(self) -> dict:
        sc, cfg = self.sc, self.cfg
        X = _probes(cfg, sc, self.rng(6))
        out, ok = {}, True
        cands = get(cfg, "casimir.candidates", [])
        if not isinstance(cands, list):
            raise ConfigError("casimir.candidates", "expected a list")
        for i, c in enumerate(cands):
            key = f"casimir.candidates.{i}"
            if not isinstance(c, dict) or "expr" not in c:
                raise ConfigError(key, "needs 'expr'")
            try:
                C = cfgmod.energy_from_expr(c["expr"], sc.model.n, name=c["expr"])
            except cfgmod.ExprError as exc:
                raise ConfigError(f"{key}.expr", str(exc)) from None
            strong = check_strong_casimir(sc.model, C, X)
            weak = check_weak_casimir(sc.model, C, X)
            kind = "strong" if strong.passed else "weak" if weak.passed else "none"
            expect = c.get("expect")
            if expect not in (None, "strong", "weak", "none"):
                raise ConfigError(f"{key}.expect", "must be strong, weak or none")
            passed = kind == expect if expect else kind != "none"
            ok &= passed
            out[c["expr"]] = {"classification": kind, "expect": expect, "strong": strong.to_dict(), "weak": weak.to_dict(), "passed": passed}
        ex = sc.interconnection
        if ex is not None:
            sys_ = sc.model
            rep = check_interconnection_casimir(sys_, ex.F, ex.S_energy, X)
            shaped, red = reduce_on_casimir(sys_, ex.F, ex.S, ex.c, ex.H_c, probes=X[:, : sys_.n_plant])
            Xp = X[:, : sys_.n_plant]
            target = ex.plant.hamiltonian(Xp) + 0.5 * (Xp[:, 0] - ex.x_e[0]) ** 2
            shaping_err = float(np.max(np.abs(shaped.hamiltonian(Xp) - target)))
            cond = reduction_conditions(ex.plant.hamiltonian, ex.H_c, [ex.F], ex.S, ex.c, ex.x_e)
            power = float(np.max(np.abs(coupling_power(sys_, X))))
            passed = rep.passed and red.passed and power <= 1e-12
            ok &= passed
            out["interconnection"] = {
                "casimir": rep.to_dict(),
                "reduction": red.to_dict(),
                "reduction_conditions": cond,
                "position_shaping_residual": shaping_err,
                "coupling_power_max": power,
                "level": ex.c,
                "passed": passed,
            }
        if not out:
            raise ConfigError("casimir", "no candidates given and the model is not an interconnection")
        out["passed"] = bool(ok)
        return out

    def simulate(self) -> dict:
        sc, cfg = self.sc, self.cfg
        dt = float(get(cfg, "simulation.dt"))
        n_steps = int(round(float(get(cfg, "simulation.T")) / dt))
        stride = int(get(cfg, "simulation.stride", 1))
        if n_steps % stride:
            raise ConfigError("simulation.stride", f"must divide the number of steps ({n_steps})")
        x0 = np.asarray(get(cfg, "simulation.x0", sc.x_e.tolist()), dtype=float)
        if x0.shape != (sc.model.n,):
            raise ConfigError("simulation.x0", f"expected {sc.model.n} entries")
        paths = int(get(cfg, "simulation.paths"))
        if paths < 1:
            raise ConfigError("simulation.paths", "must be >= 1")
        ens = simulate(sc.model, sc.control, x0, dt, n_steps, paths, self.seed, stride=stride, threads=self.threads)
        self.ensemble = ens
        for f in self._formats():
            if f == "csv":
                ensemble_to_csv(ens, self._file("ensemble.csv"))
            else:
                ensemble_to_binary(ens, self._file("ensemble.bin"))
        limit = float(get(cfg, "simulation.max_divergent", 0.0))
        fin = ens.final[~ens.diverged]
        return {
            "n_paths": ens.n_paths,
            "n_steps": ens.n_steps,
            "dt": dt,
            "stride": stride,
            "divergent_fraction": ens.divergent_fraction,
            "final_mean": fin.mean(axis=0).tolist() if len(fin) else None,
            "passed": ens.divergent_fraction <= limit,
        }

    def _reference(self):
        sc = self.sc
        if sc.linear is None:
            return None, None
        P = stationary_covariance(sc.linear)
        return sc.linear.x_e, P

    def invariant(self) -> dict:
        sc, cfg = self.sc, self.cfg
        box = _box(cfg, sc.model.n)
        h = occupation_measure(self.ensemble, box, get(cfg, "histogram.bins"), float(get(cfg, "histogram.burn_in", 0.2)))
        histogram_to_csv(h, self._file("histogram.csv"))
        mean_ref, P = self._reference()
        out = {"histogram": h.summary(gaussian_density(mean_ref, P) if P is not None else None)}
        if P is None:
            out["reference"] = None
            out["passed"] = True
            return out
        k = float(get(cfg, "histogram.mean_se", 3.0))
        tol = float(get(cfg, "histogram.cov_tol", 0.05))
        z = np.abs(h.mean - mean_ref) / h.mean_se
        cov_err = float(np.linalg.norm(h.covariance - P) / np.linalg.norm(P))
        out.update(
            reference={"mean": mean_ref.tolist(), "covariance": P.tolist(), "source": "lyapunov"},
            mean_z_scores=z.tolist(),
            mean_within_se=bool(np.all(z <= k)),
            covariance_rel_error=cov_err,
            covariance_within_tol=cov_err <= tol,
            passed=bool(np.all(z <= k) and cov_err <= tol),
        )
        return out

    def fp_solve(self) -> dict:
        sc, cfg = self.sc, self.cfg
        box = _box(cfg, sc.model.n)
        shape = tuple(int(s) for s in np.broadcast_to(get(cfg, "grid.shape"), (sc.model.n,)))
        scheme = get(cfg, "fp.scheme", "central")
        rho = stationary_solve(sc.model, box, shape, sc.control, scheme)
        for f in self._formats():
            if f == "csv":
                density_to_csv(rho, self._file("density.csv"))
            else:
                density_to_binary(rho, self._file("density.bin"))
        gen = markov_generator(sc.model, rho.grid, sc.control, scheme)
        probe = gaussian_bump(sc.x_e, 1.0)
        inv = abs(infinitesimal_invariance(gen, rho, probe))
        cons = conservation_audit(sc.model, rho, probe, 0.01, 100, sc.control, scheme)
        cons_tol = float(get(cfg, "fp.conservation_tol", 1e-6))
        out = {
            "grid": list(shape),
            "scheme": scheme,
            "residual": rho.meta["residual"],
            "mass_error": rho.meta["mass_error"],
            "min_value": rho.meta["min_value"],
            "masked_fraction": WeightedInnerProduct(rho).masked_fraction,
            "mean": rho.mean().tolist(),
            "covariance": rho.covariance().tolist(),
            "invariance_defect": inv,
            "conservation": cons.to_dict(),
        }
        ok = inv <= 1e-8 and cons.deviation_per_unit_time <= cons_tol
        mean_ref, P = self._reference()
        if P is not None:
            err = float(np.linalg.norm(rho.covariance() - P) / np.linalg.norm(P))
            tol = float(get(cfg, "fp.cov_tol", 0.02))
            out.update(reference_covariance=P.tolist(), covariance_rel_error=err, covariance_within_tol=err <= tol)
            ok &= err <= tol
        out["passed"] = bool(ok)
        return out

    def dynkin_audit(self) -> dict:
        sc, cfg = self.sc, self.cfg
        fname = get(cfg, "dynkin.function", "storage")
        if fname in ("storage", "hamiltonian"):
            f = sc.storage
        else:
            try:
                f = cfgmod.energy_from_expr(fname, sc.model.n, name=fname)
            except cfgmod.ExprError as exc:
                raise ConfigError("dynkin.function", str(exc)) from None
        dt = float(get(cfg, "dynkin.dt"))
        n_steps = int(round(float(get(cfg, "dynkin.T")) / dt))
        x0 = np.asarray(get(cfg, "dynkin.x0", sc.x_e.tolist()), dtype=float)
        if x0.shape != (sc.model.n,):
            raise ConfigError("dynkin.x0", f"expected {sc.model.n} entries")
        ens = simulate(sc.model, sc.control, x0, dt, n_steps, int(get(cfg, "dynkin.paths")), self.seed + 1, threads=self.threads)
        res = dynkin_residual(ens, f, sc.context())
        return dict(res.to_dict(), function=fname)

    def run(self, analyses) -> dict:
        table = {
            "validate": self.validate,
            "passivity": self.passivity,
            "shaping-check": self.shaping_check,
            "casimir-check": self.casimir_check,
            "simulate": self.simulate,
            "invariant": self.invariant,
            "fp-solve": self.fp_solve,
            "dynkin-audit": self.dynkin_audit,
        }
        results = {}
        for a in analyses:
            try:
                results[a] = table[a]()
            except ConfigError:
                raise
            except Exception as exc:  # noqa: BLE001 - reported as a failed check
                results[a] = {"passed": False, "error": f"{type(exc).__name__}: {exc}"}
        return results


# ---------------------------------------------------------------------------
# report writing
# ---------------------------------------------------------------------------


def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isfinite(v):
            return v
        return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return obj


def write_json(path: Path, data) -> None:
    with open(path, "w") as fh:
        json.dump(jsonable(data), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"sphs: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sphs", description="Stochastic port-Hamiltonian analyses from scenario configs.")
    p.add_argument("--version", action="version", version=f"sphs {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    r = sub.add_parser("run", help="run the analyses of a scenario config")
    r.add_argument("config", help="config path, or the name of a built-in scenario")
    r.add_argument("out_pos", nargs="?", metavar="OUT", help="output directory")
    r.add_argument("--out", help="output directory (default: out)")
    r.add_argument("--seed", type=int, help="run seed (same as --set seed=N)")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (dotted path, JSON value)")
    r.add_argument("--threads", type=int, default=1, help="worker threads for path simulation")
    r.add_argument("--format", choices=("csv", "binary", "both"), help="export format for ensembles and densities")
    sub.add_parser("list", help="list built-in scenario configs")
    return p


def _resolve_config(name: str) -> Path:
    path = Path(name)
    if path.is_file():
        return path
    builtin = cfgmod.builtin_path(name)
    if builtin is None:
        raise ConfigError("config", f"no such file or built-in scenario: {name}")
    return builtin


def run(config, out_dir, overrides=(), seed=None, threads: int = 1, fmt=None, argv=None) -> int:
    """Run a scenario; returns the process exit code."""
    started = time.time()
    start_stamp = datetime.now(timezone.utc).isoformat()
    try:
        path = _resolve_config(str(config))
        cfg = cfgmod.load(path)
        ov = [cfgmod.parse_override(s) if isinstance(s, str) else s for s in overrides]
        if seed is not None:
            ov.append(("seed", int(seed)))
        if fmt is not None:
            ov.append(("output.format", fmt))
        cfg = cfgmod.apply_overrides(cfg, ov)
        analyses = cfgmod.validate_config(cfg)
        if threads < 1:
            raise ConfigError("--threads", "must be >= 1")
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            probe = out / ".write_test"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise ConfigError("out", f"output directory not writable: {exc.strerror or exc}") from None
        runner = Runner(cfg, out, get(cfg, "output.format", "binary"), threads)
        results = runner.run(analyses)
    except ConfigError as exc:
        print(f"sphs: config error: {exc}", file=sys.stderr)
        return 1
    passed = all(bool(r.get("passed")) for r in results.values())
    code = 0 if passed else 2
    report = {
        "report_version": REPORT_VERSION,
        "name": cfg.get("name", path.stem),
        "seed": runner.seed,
        "config": cfg,
        "analyses": analyses,
        "results": results,
        "passed": passed,
        "exit_code": code,
        "files": sorted(runner.files),
    }
    write_json(out / "report.json", report)
    write_json(
        out / "metadata.json",
        {
            "started": start_stamp,
            "finished": datetime.now(timezone.utc).isoformat(),
            "elapsed_seconds": time.time() - started,
            "argv": list(argv) if argv is not None else None,
            "config_path": str(path),
            "threads": threads,
            "sphs_version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "host": platform.node(),
            "pid": os.getpid(),
        },
    )
    failed = [a for a, r in results.items() if not r.get("passed")]
    if failed:
        print(f"sphs: checks failed: {', '.join(failed)}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    if args.command == "list":
        for name in cfgmod.builtin_names():
            print(name)
        return 0
    out = args.out or args.out_pos or "out"
    return run(args.config, out, args.set, args.seed, args.threads, args.format, argv if argv is not None else sys.argv[1:])


if __name__ == "__main__":
    raise SystemExit(main())
