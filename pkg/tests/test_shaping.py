import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sphs.generator import GeneratorContext, apply_generator
from sphs.sde import LinearModelView
from sphs.scenarios import pendulum, pendulum_plans, shaped_pendulum
from sphs.shaping import (
    ShapingError,
    ShapingPlan,
    assemble_shaped,
    check_conditions,
    closed_loop_drift,
    dissipation_rate,
    generator_bound_gap,
    generator_bound_gap_closed_form,
    is_strict_local_minimum,
    line_integral_potential,
    matching_residual,
)


@pytest.fixture
def probes(rng):
    return rng.uniform(-4, 4, (300, 2))


@given(st.floats(-1.5, 1.5))
def test_full_and_partial_plans_match(x1e):
    X = np.random.default_rng(3).uniform(-4, 4, (50, 2))
    plans = pendulum_plans(x1e)
    for key in ("full", "partial"):
        assert np.max(np.abs(matching_residual(pendulum(), plans[key], X))) < 1e-10


def test_broken_plan_has_large_residual(probes):
    res = matching_residual(pendulum(), pendulum_plans(0.5)["broken"], probes)
    assert np.max(np.abs(res)) > 0.1
    rep = check_conditions(pendulum(), pendulum_plans(0.5)["broken"], probes)
    assert not rep.matching.passed and not rep.passed
    with pytest.raises(ShapingError):
        assemble_shaped(pendulum(), pendulum_plans(0.5)["broken"], probes)


def test_full_plan_conditions(probes):
    lin = LinearModelView.from_model(shaped_pendulum(0.5))
    rep = check_conditions(pendulum(), pendulum_plans(0.5)["full"], probes, linear_view=lin)
    c = rep.conditions
    assert rep.matching.passed
    for key in ("i_structure", "ii_integrability", "iii_equilibrium", "iv_stability", "vi_uniqueness"):
        assert c[key].passed, key
    assert c["v_ultimate_passivity"].passed is None
    assert c["vi_uniqueness"].detail["vi_b_kalman_rank"] == 2
    assert rep.to_dict()["passed"]


def test_partial_plan_misses_equilibrium_off_origin(probes):
    rep = check_conditions(pendulum(), pendulum_plans(0.5)["partial"], probes)
    assert rep.matching.passed
    assert not rep.conditions["iii_equilibrium"].passed
    rep0 = check_conditions(pendulum(), pendulum_plans(0.0)["partial"], probes)
    assert rep0.conditions["iii_equilibrium"].passed


def test_shell_condition_fails_for_quadratic_target(probes):
    # L H_d = 1 - x2^2 stays positive along x2 = 0
    rep = check_conditions(pendulum(), pendulum_plans(0.5)["full"], probes, shell_params={"radii": [2, 4, 8], "eps": 0.1})
    assert rep.conditions["v_ultimate_passivity"].passed is False


def test_assembled_equals_hand_built(probes):
    sh = assemble_shaped(pendulum(), pendulum_plans(0.5)["full"], probes)
    ref = shaped_pendulum(0.5)
    np.testing.assert_allclose(sh.model.drift0(probes), ref.drift0(probes), atol=1e-12)
    diff = sh.hamiltonian(probes) - ref.hamiltonian(probes)
    np.testing.assert_allclose(diff, diff[0], atol=1e-12)
    np.testing.assert_allclose(
        apply_generator(sh.context(), sh.hamiltonian, probes),
        apply_generator(GeneratorContext(ref), ref.hamiltonian, probes),
        atol=1e-11,
    )
    np.testing.assert_allclose(sh.output_original(probes)[:, 0], probes[:, 1])
    assert sh.max_drift_error < 1e-12
    np.testing.assert_allclose(sh.model.drift0(probes), closed_loop_drift(pendulum(), sh.plan, probes), atol=1e-12)


def test_line_integral_matches_closed_form(probes):
    plan = pendulum_plans(0.5)["full"]
    Ha = line_integral_potential(plan.K, plan.jacobian, plan.x_e, 2)
    diff = Ha(probes) - plan.H_a(probes)
    np.testing.assert_allclose(diff, diff[0], atol=1e-10)


def test_fd_jacobian_plan_assembles(probes):
    full = pendulum_plans(0.5)["full"]
    plan = ShapingPlan.build(2, 1, full.J_a, full.R_a, full.K, full.phi, full.x_e)
    sh = assemble_shaped(pendulum(), plan, probes)
    np.testing.assert_allclose(sh.model.drift0(probes), shaped_pendulum(0.5).drift0(probes), atol=1e-8)


def test_generator_bound_gap_two_routes(probes):
    for key in ("full", "partial"):
        plan = pendulum_plans(0.3)[key]
        a = generator_bound_gap(pendulum(), plan, probes)
        b = generator_bound_gap_closed_form(pendulum(), plan, probes)
        np.testing.assert_allclose(a, b, atol=1e-9)


def test_strict_minimum_and_dissipation(probes):
    sh = assemble_shaped(pendulum(), pendulum_plans(0.5)["full"], probes)
    g, e, ok = is_strict_local_minimum(sh)
    assert ok and g < 1e-12 and e == pytest.approx(1.0)
    np.testing.assert_allclose(dissipation_rate(sh, probes), probes[:, 1] ** 2, atol=1e-12)


def test_zero_plan_and_bad_xe():
    z = ShapingPlan.zero(2, 1)
    assert np.all(matching_residual(pendulum(), z, np.ones((3, 2))) == 0)
    with pytest.raises(ShapingError):
        ShapingPlan.build(2, 1, np.zeros((2, 2)), np.zeros((2, 2)), np.zeros(2), np.zeros(1), [0.0, 0.0, 0.0])
