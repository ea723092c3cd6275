import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sphs.generator import GeneratorContext, apply_generator
from sphs.model import derivative_residuals, validate
from sphs.scenarios import (
    RlcParams,
    casimir_3d,
    counterexample,
    log_squared_storage,
    ou,
    ou_nonreversible,
    ou_reversible,
    pendulum,
    pendulum_hamiltonian,
    rlc,
    rlc_admissible,
    rlc_generator_at_equilibrium,
    rlc_generator_closed_form,
    rlc_shaped,
    rlc_shaped_hamiltonian,
)


def test_builtins_are_valid_sphs(rng):
    X2 = rng.uniform(-2, 2, (40, 2))
    for m in (pendulum(), ou_nonreversible(), ou_reversible(), rlc()):
        assert validate(m, X2).passed, m.name
    assert validate(casimir_3d(), rng.uniform(-2, 2, (40, 3))).passed
    p = RlcParams()
    Xr = p.x_e + rng.uniform(-1, 1, (40, 2))
    assert validate(rlc_shaped(p), Xr).passed


def test_pendulum_energy_derivatives(rng):
    res = derivative_residuals(pendulum_hamiltonian(), rng.uniform(-4, 4, (30, 2)))
    assert res["gradient"] < 1e-6 and res["hessian"] < 1e-5


def test_counterexample_storage_and_limit():
    X = np.array([[-3.0], [-0.5], [0.7], [4.0]])
    res = derivative_residuals(log_squared_storage(), X)
    assert res["gradient"] < 1e-6 and res["hessian"] < 1e-5
    m = counterexample()
    L = apply_generator(GeneratorContext(m), m.storage, np.array([[10.0], [1e2], [1e3], [1e4]]))
    assert np.all(L > 0) and np.all(np.diff(L) < 0) and L[-1] < 1e-6


def test_rlc_default_parameters():
    p = RlcParams()
    np.testing.assert_allclose(p.x_e, [4.0, 2.0])
    assert p.c2 == pytest.approx(0.68)
    assert p.to_dict()["c2"] == pytest.approx(0.68)


@given(st.floats(-0.03, -0.005), st.floats(-2.0, -0.5))
def test_rlc_equilibrium_is_critical_point(c1, c3):
    p = RlcParams(c1=c1, c3=c3)
    H = rlc_shaped_hamiltonian(p)
    assert np.max(np.abs(H.gradient(p.x_e))) < 1e-10
    X = p.x_e + np.random.default_rng(0).uniform(-0.5, 0.5, (10, 2))
    res = derivative_residuals(H, X)
    assert res["gradient"] < 1e-5 and res["hessian"] < 1e-4


def test_rlc_hessian_positivity_threshold():
    # positive definite at x_e exactly when c1 > -1/32
    for c1, pd in ((-0.02, True), (-0.031, True), (-0.0315, False), (-0.1, False)):
        p = RlcParams(c1=c1)
        ev = np.linalg.eigvalsh(rlc_shaped_hamiltonian(p).hessian(p.x_e))
        assert (ev.min() > 0) == pd, c1


@given(st.floats(-0.03, -0.005), st.floats(0.2, 2.0), st.floats(0.2, 2.0))
def test_rlc_generator_routes_agree(c1, s1, s2):
    p = RlcParams(c1=c1, sigma1=s1, sigma2=s2)
    m = rlc_shaped(p)
    a = apply_generator(GeneratorContext(m), m.hamiltonian, p.x_e[None])[0]
    assert a == pytest.approx(rlc_generator_at_equilibrium(p), rel=1e-10)
    X = p.x_e + np.random.default_rng(1).uniform(-1, 1, (20, 2))
    X = X[m.is_admissible(X)]
    np.testing.assert_allclose(apply_generator(GeneratorContext(m), m.hamiltonian, X), rlc_generator_closed_form(p, X), rtol=1e-10, atol=1e-10)


def test_rlc_admissible_region():
    p = RlcParams()
    ok = rlc_admissible(p)
    assert ok(p.x_e)
    # den = a c1 x1 + c2 vanishes at x1 = 17
    assert not ok(np.array([17.0, 2.0]))
    assert not ok(np.array([4.0, -50.0]))


def test_ou_split_reproduces_drift(rng):
    A = np.array([[-1.0, 2.0], [0.5, -3.0]])
    m = ou(A)
    X = rng.standard_normal((10, 2))
    np.testing.assert_allclose(m.drift0(X), X @ A.T, atol=1e-14)
    bad = validate(ou(np.array([[1.0, 0.0], [0.0, -1.0]])), X)
    assert "R_psd" in {v.check for v in bad.violations}
