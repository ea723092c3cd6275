import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sphs.generator import (
    GeneratorContext,
    NonFiniteError,
    apply_adjoint,
    apply_generator,
    apply_generator_grid,
    generator_terms,
    quadratic_case_summary,
)
from sphs.grid import DensityField, Grid, GridError
from sphs.model import (
    Box,
    ControlLaw,
    ControlledSde,
    EnergyFunction,
    ModelError,
    SphsModel,
    constant_energy,
    gaussian_bump,
    quadratic_hamiltonian,
)
from sphs.scenarios import ou_nonreversible, pendulum, shaped_pendulum

entries = st.floats(-2, 2, allow_nan=False)


def _random_sphs(A, B, S):
    Lam = A @ A.T + 0.5 * np.eye(2)
    J = B - B.T
    R = S @ S.T
    sigma = np.array([[1.0, 0.3], [0.0, 0.7]])
    g = np.array([[0.0], [1.0]])
    return SphsModel(J, R, g, sigma, quadratic_hamiltonian(Lam)), Lam, R, sigma @ sigma.T


@given(
    arrays(np.float64, (2, 2), elements=entries),
    arrays(np.float64, (2, 2), elements=entries),
    arrays(np.float64, (2, 2), elements=entries),
    arrays(np.float64, (8, 2), elements=st.floats(-5, 5, allow_nan=False)),
    st.floats(-3, 3, allow_nan=False),
)
def test_quadratic_generator_closed_form(A, B, S, X, u):
    m, Lam, R, Sig = _random_sphs(A, B, S)
    ctx = GeneratorContext(m, ControlLaw.constant([u]))
    LH = apply_generator(ctx, m.hamiltonian, X)
    y = (X @ Lam)[:, 1]
    expected = -np.einsum("ki,ij,kj->k", X, Lam @ R @ Lam, X) + 0.5 * np.trace(Lam @ Sig) + y * u
    np.testing.assert_allclose(LH, expected, rtol=1e-9, atol=1e-9)


@given(arrays(np.float64, (2, 2), elements=entries), arrays(np.float64, (2, 2), elements=entries))
def test_terms_sum_to_generator(A, S):
    m, *_ = _random_sphs(A, np.zeros((2, 2)), S)
    X = np.random.default_rng(0).standard_normal((5, 2))
    ctx = GeneratorContext(m, ControlLaw.constant([0.5]))
    f = gaussian_bump([0.1, 0.2], 1.3)
    terms = generator_terms(ctx, f, X)
    np.testing.assert_allclose(sum(terms.values()), apply_generator(ctx, f, X), atol=1e-12)


def test_generator_kills_constants(rng):
    ctx = GeneratorContext(pendulum(), ControlLaw.constant([2.0]))
    X = rng.standard_normal((10, 2))
    assert np.all(apply_generator(ctx, constant_energy(2, 3.0), X) == 0)


def test_shaped_pendulum_generator(rng):
    m = shaped_pendulum(0.7)
    X = rng.uniform(-4, 4, (200, 2))
    np.testing.assert_allclose(apply_generator(GeneratorContext(m), m.hamiltonian, X), 1 - X[:, 1] ** 2, atol=1e-12)


def test_control_dimension_mismatch():
    with pytest.raises(ModelError):
        GeneratorContext(pendulum(), ControlLaw.zero(2))


def test_nonfinite_reported():
    bad = EnergyFunction(
        1,
        lambda x: np.log(np.asarray(x)[..., 0]),
        lambda x: (1.0 / np.asarray(x)[..., 0])[..., None],
        lambda x: (-1.0 / np.asarray(x)[..., 0] ** 2)[..., None, None],
    )
    m = ControlledSde(1, 1, lambda x: -x, np.eye(1))
    with np.errstate(divide="ignore"):
        with pytest.raises(NonFiniteError) as exc:
            apply_generator(GeneratorContext(m), bad, np.array([[0.0], [1.0]]))
    assert exc.value.count == 1


def test_quadratic_summary_identity_case():
    s = quadratic_case_summary(np.eye(2), np.eye(2), np.eye(2))
    assert s.constant == 2.0
    assert s.radius == pytest.approx(np.sqrt(2.0))
    assert s.generator_radius == pytest.approx(1.0)
    assert quadratic_case_summary(np.eye(2), np.zeros((2, 2)), np.eye(2)).radius == np.inf
    assert quadratic_case_summary(np.eye(2), np.eye(2), np.zeros((2, 2))).radius == 0.0


def _grid_error(N, op):
    m = ou_nonreversible()
    ctx = GeneratorContext(m)
    g = Grid(Box((-4.0, -4.0), (4.0, 4.0)), (N, N))
    f = gaussian_bump([0.3, -0.2], 0.8)
    F = DensityField.from_function(g, f)
    exact = apply_generator(ctx, f, g.points())
    approx = op(ctx, F).values
    return np.max(np.abs(approx - exact))


def test_grid_generator_second_order():
    e1, e2 = _grid_error(40, apply_generator_grid), _grid_error(80, apply_generator_grid)
    assert np.log2(e1 / e2) > 1.8


def test_grid_adjoint_duality_order():
    # <L f, g> with analytic L against <f, L* g> on the grid
    m = ou_nonreversible()
    ctx = GeneratorContext(m)
    f = gaussian_bump([0.3, -0.2], 0.6)
    gfun = gaussian_bump([-0.4, 0.1], 0.7)
    errs = []
    for N in (40, 80, 160):
        grid = Grid(Box((-5.0, -5.0), (5.0, 5.0)), (N, N))
        P = grid.points()
        lhs = grid.integrate(apply_generator(ctx, f, P) * gfun(P))
        rhs = grid.integrate(f(P) * apply_adjoint(ctx, DensityField.from_function(grid, gfun)).values)
        errs.append(abs(lhs - rhs))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders > 1.8)


def test_grid_too_coarse():
    grid = Grid(Box((0.0, 0.0), (1.0, 1.0)), (4, 10))
    with pytest.raises(GridError):
        apply_adjoint(GeneratorContext(ou_nonreversible()), DensityField(grid, np.ones((4, 10))))
