import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sphs.casimir import (
    AffineMap,
    casimir_level,
    check_interconnection_casimir,
    check_strong_casimir,
    check_weak_casimir,
    coupling_power,
    interconnect,
    reduce_on_casimir,
    reduced_hamiltonian,
    reduction_conditions,
)
from sphs.config import energy_from_expr
from sphs.ergodics import dynkin_residual
from sphs.generator import GeneratorContext
from sphs.model import ModelError, SphsModel, constant_energy, linear_energy, quadratic_hamiltonian
from sphs.scenarios import casimir_3d, interconnection_example
from sphs.sde import simulate


@pytest.fixture
def probes3(rng):
    return rng.uniform(-3, 3, (100, 3))


def test_x3_weak_not_strong_with_noise(probes3):
    m = casimir_3d()
    x3 = linear_energy([0.0, 0.0, 1.0])
    assert check_weak_casimir(m, x3, probes3).passed
    rep = check_strong_casimir(m, x3, probes3)
    assert not rep.passed and rep.holds["structure"] and not rep.holds["noise"]


def test_x3_strong_without_its_noise(probes3):
    assert check_strong_casimir(casimir_3d(False), linear_energy([0.0, 0.0, 1.0]), probes3).passed


def test_radial_candidate_is_not_casimir(probes3):
    r = energy_from_expr("x1**2 + x2**2", 3)
    assert not check_weak_casimir(casimir_3d(), r, probes3).passed


@given(st.floats(-5, 5))
def test_constants_are_strong(c):
    X = np.random.default_rng(1).standard_normal((10, 3))
    assert check_strong_casimir(casimir_3d(), constant_energy(3, c), X).passed


def test_invertible_structure_has_no_linear_casimir(rng):
    m = SphsModel(np.array([[0.0, 1.0], [-1.0, 0.0]]), np.eye(2), None, np.eye(2), quadratic_hamiltonian(np.eye(2)))
    X = rng.standard_normal((20, 2))
    for c in ([1.0, 0.0], [0.0, 1.0], [1.0, 1.0]):
        assert not check_weak_casimir(m, linear_energy(c), X).passed


def test_strong_casimir_pathwise_constant():
    m = casimir_3d(False)
    ens = simulate(m, None, [0.5, -0.2, 1.3], 0.01, 200, 50, seed=4)
    assert np.all(ens.states[:, :, 2] == 1.3)


def test_weak_casimir_constant_in_mean():
    m = casimir_3d()
    x3 = linear_energy([0.0, 0.0, 1.0])
    ens = simulate(m, None, [0.5, -0.2, 1.3], 0.01, 100, 10_000, seed=5)
    rep = dynkin_residual(ens, x3, GeneratorContext(m))
    assert rep.passed
    assert abs(ens.final[:, 2].mean() - 1.3) < 3 * np.sqrt(1.0 / 10_000) * 1.1
    # the pathwise spread is the Brownian one, not zero
    assert ens.final[:, 2].var() == pytest.approx(1.0, rel=0.05)


@pytest.fixture
def ex():
    return interconnection_example(0.4)


def test_interconnected_blocks(ex, rng):
    sys = interconnect(ex.plant, ex.controller)
    w = rng.standard_normal(3)
    J = sys.J(w)
    np.testing.assert_allclose(J, -J.T)
    np.testing.assert_allclose(J[:2, 2], [0.0, -1.0])
    np.testing.assert_allclose(J[2, :2], [0.0, 1.0])
    assert sys.n == 3 and sys.m == 2 and sys.d == 3
    np.testing.assert_allclose(coupling_power(sys, rng.standard_normal((30, 3))), 0.0, atol=1e-14)


def test_interconnection_casimir_five_conditions(ex, rng):
    sys = interconnect(ex.plant, ex.controller)
    rep = check_interconnection_casimir(sys, ex.F, ex.S_energy, rng.standard_normal((50, 3)) * 2)
    assert rep.passed
    assert rep.extra["sufficient_conditions_pass"] and rep.extra["residual_pass"]


def test_velocity_casimir_breaks_condition4(rng):
    ex2 = interconnection_example(0.0, F_index=1)
    sys = interconnect(ex2.plant, ex2.controller)
    rep = check_interconnection_casimir(sys, ex2.F, ex2.S_energy, rng.standard_normal((50, 3)))
    assert not rep.holds["cond4_dFJ_eq_dS_gc_gT"]
    assert not rep.passed


def test_reduction(ex, rng):
    sys = interconnect(ex.plant, ex.controller)
    X = rng.standard_normal((60, 2)) * 2
    shaped, rep = reduce_on_casimir(sys, ex.F, ex.S, ex.c, probes=X)
    assert rep.passed
    Hd = reduced_hamiltonian(ex.plant.hamiltonian, ex.H_c, [ex.F], ex.S, ex.c)
    expected = ex.plant.hamiltonian(X) + 0.5 * (X[:, 0] - 0.4) ** 2
    np.testing.assert_allclose(Hd(X), expected, atol=1e-12)
    np.testing.assert_allclose(shaped.hamiltonian(X), expected, atol=1e-12)


def test_reduction_conditions_gravity_free():
    ex0 = interconnection_example(0.4, g_grav=0.0)
    out = reduction_conditions(ex0.plant.hamiltonian, ex0.H_c, [ex0.F], ex0.S, ex0.c, ex0.x_e)
    assert out["equilibrium_holds"]
    assert out["stability_holds"] and out["stability_min_eig"] == pytest.approx(1.0)


def test_casimir_level_and_map_checks(ex):
    c = casimir_level([ex.F], ex.S, [1.0, 0.0], [0.6])
    np.testing.assert_allclose(c, [-0.4])
    assert np.allclose(AffineMap.identity(2).inverse([1.0, 2.0]), [1.0, 2.0])
    sys = interconnect(ex.plant, ex.controller)
    with pytest.raises(ModelError):
        reduce_on_casimir(sys, ex.F, ex.S_energy, ex.c)
    with pytest.raises(ModelError):
        check_interconnection_casimir(sys, ex.S_energy, ex.S_energy, np.zeros((1, 3)))
