import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sphs.model import (
    Box,
    ControlLaw,
    ControlledSde,
    EnergyFunction,
    ModelError,
    SphsModel,
    constant_field,
    derivative_residuals,
    fd_gradient,
    gaussian_bump,
    linear_energy,
    output,
    quadratic_hamiltonian,
    validate,
    zero_energy,
)
from sphs.scenarios import pendulum, pendulum_hamiltonian

finite = st.floats(-3, 3, allow_nan=False)


def spd(draw_mat):
    A = np.asarray(draw_mat)
    return A @ A.T + 0.5 * np.eye(A.shape[0])


@given(arrays(np.float64, (3, 3), elements=finite), arrays(np.float64, (5, 3), elements=finite))
def test_quadratic_derivatives_match_fd(M, X):
    H = quadratic_hamiltonian(spd(M))
    res = derivative_residuals(H, X)
    assert res["gradient"] < 1e-6
    assert res["hessian"] < 1e-6


def test_energy_arithmetic_is_pointwise(rng):
    X = rng.standard_normal((7, 2))
    a = quadratic_hamiltonian(np.eye(2))
    b = gaussian_bump([0.3, -0.1], 0.7)
    c = (a + 2.0 * b) - b
    np.testing.assert_allclose(c(X), a(X) + b(X))
    np.testing.assert_allclose(c.gradient(X), a.gradient(X) + b.gradient(X))
    np.testing.assert_allclose((-a).hessian(X), -a.hessian(X))
    with pytest.raises(ModelError):
        _ = a + quadratic_hamiltonian(np.eye(3))


def test_quadratic_rejects_bad_lambda():
    with pytest.raises(ModelError):
        quadratic_hamiltonian([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ModelError):
        quadratic_hamiltonian(-np.eye(2))


def test_linear_and_zero_energy(rng):
    X = rng.standard_normal((4, 3))
    f = linear_energy([1.0, -2.0, 0.5], 3.0)
    np.testing.assert_allclose(f(X), X @ [1.0, -2.0, 0.5] + 3.0)
    assert np.all(f.hessian(X) == 0)
    assert np.all(zero_energy(3)(X) == 0)


def test_constant_field_broadcasts_and_is_readonly():
    fn = constant_field(np.eye(2))
    out = fn(np.zeros((4, 3, 2)))
    assert out.shape == (4, 3, 2, 2)
    with pytest.raises(ValueError):
        out[0, 0, 0, 0] = 5.0


def test_fd_gradient_batch(rng):
    X = rng.standard_normal((6, 2))
    H = pendulum_hamiltonian()
    np.testing.assert_allclose(fd_gradient(H.value, X), H.gradient(X), atol=1e-7)


def test_control_law_kinds():
    assert ControlLaw.zero(2)(np.ones((3, 2))).shape == (3, 2)
    np.testing.assert_allclose(ControlLaw.constant([1.5])(np.zeros((2, 2))), [[1.5], [1.5]])
    law = ControlLaw.state_feedback(lambda x: -x[..., :1], 1)
    np.testing.assert_allclose(law(np.array([2.0, 0.0])), [-2.0])


def test_box_sampling_inside():
    b = Box((-1.0, 0.0), (1.0, 2.0))
    S = b.sample(100, seed=1)
    assert np.all(b.contains(S))
    np.testing.assert_allclose(b.center, [0.0, 1.0])


def test_sphs_drift_and_output(rng):
    m = pendulum()
    X = rng.standard_normal((5, 2))
    gH = m.hamiltonian.gradient(X)
    np.testing.assert_allclose(m.drift0(X), gH @ (m.J(X[0]) - m.R(X[0])).T)
    np.testing.assert_allclose(output(m, X)[:, 0], X[:, 1])
    np.testing.assert_allclose(m.drift(X, np.ones((5, 1)))[:, 1], m.drift0(X)[:, 1] + 1.0)


def test_sphs_dimension_errors():
    H = quadratic_hamiltonian(np.eye(2))
    with pytest.raises(ModelError):
        SphsModel(np.zeros((3, 3)), np.zeros((2, 2)), None, np.eye(2), H)
    with pytest.raises(ModelError):
        ControlledSde(2, 1, lambda x: x, np.ones((3, 1)))


def test_validate_flags_structure_violations(rng):
    H = quadratic_hamiltonian(np.eye(2))
    bad = SphsModel(np.array([[0.0, 1.0], [1.0, 0.0]]), -np.eye(2), None, np.eye(2), H)
    rep = validate(bad, rng.standard_normal((10, 2)))
    names = {v.check for v in rep.violations}
    assert {"J_antisymmetry", "R_psd"} <= names
    assert validate(pendulum(), rng.standard_normal((10, 2))).passed


def test_validate_flags_wrong_gradient(rng):
    good = quadratic_hamiltonian(np.eye(2))
    wrong = EnergyFunction(2, good.value, lambda x: 2.0 * good.gradient(x), good.hessian)
    m = SphsModel(np.zeros((2, 2)), np.eye(2), None, np.eye(2), wrong)
    rep = validate(m, rng.standard_normal((10, 2)))
    assert "gradient_fd" in {v.check for v in rep.violations}


def test_admissible_filters_probes():
    m = ControlledSde(1, 1, lambda x: -x, np.eye(1), admissible=lambda x: x[..., 0] > 0)
    np.testing.assert_array_equal(m.is_admissible(np.array([[-1.0], [1.0], [np.nan]])), [False, True, False])
