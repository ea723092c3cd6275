import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

import sphs.sde as sde
from sphs.model import ControlLaw, ControlledSde
from sphs.scenarios import ou, ou_nonreversible, pendulum, shaped_pendulum
from sphs.sde import (
    LinearModelView,
    NotHurwitzError,
    ensemble_from_binary,
    ensemble_from_csv,
    ensemble_to_binary,
    ensemble_to_csv,
    finite_horizon_covariance,
    kalman_rank,
    simulate,
    stationary_covariance,
)


def test_same_seed_same_paths():
    m = pendulum()
    a = simulate(m, ControlLaw.constant([0.3]), [0.1, 0.0], 0.01, 50, 8, seed=11)
    b = simulate(m, ControlLaw.constant([0.3]), [0.1, 0.0], 0.01, 50, 8, seed=11)
    c = simulate(m, ControlLaw.constant([0.3]), [0.1, 0.0], 0.01, 50, 8, seed=12)
    np.testing.assert_array_equal(a.states, b.states)
    assert not np.array_equal(a.states, c.states)


@settings(max_examples=10)
@given(st.integers(1, 6))
def test_threads_do_not_change_paths(threads):
    m = ou_nonreversible()
    ref = simulate(m, None, [1.0, 0.0], 0.01, 40, 13, seed=3)
    got = simulate(m, None, [1.0, 0.0], 0.01, 40, 13, seed=3, threads=threads)
    np.testing.assert_array_equal(ref.states, got.states)


def test_path_independent_of_ensemble_size():
    m = ou_nonreversible()
    small = simulate(m, None, [1.0, 0.0], 0.01, 40, 3, seed=3)
    big = simulate(m, None, [1.0, 0.0], 0.01, 40, 10, seed=3)
    np.testing.assert_array_equal(small.states, big.states[:3])


def test_chunking_does_not_change_paths(monkeypatch):
    m = ou_nonreversible()
    ref = simulate(m, None, [1.0, 0.0], 0.01, 37, 5, seed=9)
    monkeypatch.setattr(sde, "_CHUNK_BUDGET", 7)
    got = simulate(m, None, [1.0, 0.0], 0.01, 37, 5, seed=9)
    np.testing.assert_array_equal(ref.states, got.states)


def test_stride_subsamples():
    m = ou_nonreversible()
    full = simulate(m, None, [1.0, 0.0], 0.01, 40, 4, seed=2)
    sub = simulate(m, None, [1.0, 0.0], 0.01, 40, 4, seed=2, stride=10)
    np.testing.assert_array_equal(sub.states, full.states[:, ::10])
    np.testing.assert_allclose(sub.times, [0.0, 0.1, 0.2, 0.3, 0.4])
    with pytest.raises(ValueError):
        simulate(m, None, [1.0, 0.0], 0.01, 40, 4, seed=2, stride=7)


def test_divergence_is_flagged_and_frozen():
    m = ControlledSde(1, 1, lambda x: x**3, np.zeros((1, 1)))
    with np.errstate(over="ignore", invalid="ignore"):
        ens = simulate(m, None, np.array([[0.1], [50.0]]), 0.1, 30, 2, seed=0)
    assert list(ens.diverged) == [False, True]
    assert ens.divergent_fraction == 0.5
    assert np.all(np.isfinite(ens.states))
    k = ens.diverged_at[1]
    assert np.all(ens.states[1, k:] == ens.states[1, k - 1])


def test_euler_step_is_explicit():
    m = ControlledSde(1, 1, lambda x: -2.0 * x, np.zeros((1, 1)))
    ens = simulate(m, None, [1.0], 0.1, 5, 1, seed=0)
    np.testing.assert_allclose(ens.states[0, :, 0], 0.8 ** np.arange(6))


def test_kalman_rank():
    A = shaped_pendulum().linear[0]
    assert kalman_rank(A, [[0.0], [1.0]]) == (2, True)
    assert kalman_rank(np.diag([-1.0, -2.0]), [[1.0], [0.0]]) == (1, False)
    assert kalman_rank(A, np.zeros((2, 1))) == (0, False)


def test_finite_horizon_matches_matrix_exponential():
    A = np.array([[-1.0, 1.0], [-1.0, -1.0]])
    S = np.array([[1.0, 0.0], [0.5, 1.0]])
    lin = LinearModelView(A, S)
    Q = S @ S.T
    t = 1.5
    # Van Loan block exponential
    n = 2
    M = np.zeros((2 * n, 2 * n))
    M[:n, :n] = -A
    M[:n, n:] = Q
    M[n:, n:] = A.T
    E = expm(M * t)
    ref = E[n:, n:].T @ E[:n, n:]
    np.testing.assert_allclose(finite_horizon_covariance(lin, t), ref, atol=1e-10)
    assert np.all(finite_horizon_covariance(lin, 0.0) == 0)


def test_stationary_covariance_and_limit():
    lin = LinearModelView.from_model(ou_nonreversible())
    P = stationary_covariance(lin)
    np.testing.assert_allclose(P, 0.5 * np.eye(2), atol=1e-12)
    np.testing.assert_allclose(finite_horizon_covariance(lin, 30.0), P, atol=1e-10)


def test_not_hurwitz():
    with pytest.raises(NotHurwitzError) as exc:
        stationary_covariance(LinearModelView(np.diag([-1.0, 0.0]), np.eye(2)))
    assert exc.value.eigenvalues.size == 2
    with pytest.raises(ValueError):
        LinearModelView.from_model(pendulum())


def test_ou_sample_covariance():
    m = ou(np.array([[-1.0, 0.0], [0.0, -2.0]]))
    ens = simulate(m, None, [0.0, 0.0], 0.01, 300, 4000, seed=1, stride=300)
    C = np.cov(ens.final.T)
    ref = finite_horizon_covariance(LinearModelView.from_model(m), 3.0)
    assert np.max(np.abs(C - ref)) < 0.05


def test_csv_round_trip(tmp_path):
    ens = simulate(pendulum(), None, [0.2, 0.1], 0.01, 20, 3, seed=5, stride=5)
    p = tmp_path / "e.csv"
    ensemble_to_csv(ens, p)
    back = ensemble_from_csv(p, dt=0.01, seed=5)
    np.testing.assert_array_equal(back.states, ens.states)
    assert back.stride == 5 and back.n_steps == 20


def test_binary_round_trip(tmp_path):
    ens = simulate(pendulum(), None, [0.2, 0.1], 0.01, 20, 3, seed=5, stride=2)
    p = tmp_path / "e.bin"
    ensemble_to_binary(ens, p)
    back = ensemble_from_binary(p)
    np.testing.assert_array_equal(back.states, ens.states)
    np.testing.assert_array_equal(back.diverged_at, ens.diverged_at)
    assert (back.dt, back.seed, back.stride, back.n_steps) == (0.01, 5, 2, 20)
    p.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(ValueError):
        ensemble_from_binary(p)


def test_bad_arguments():
    m = pendulum()
    with pytest.raises(ValueError):
        simulate(m, None, [0.0, 0.0], 0.0, 10, 1, seed=0)
    with pytest.raises(ValueError):
        simulate(m, None, [0.0, 0.0, 0.0], 0.1, 10, 1, seed=0)
    with pytest.raises(ValueError):
        simulate(m, None, [0.0, 0.0], 0.1, 0, 1, seed=0)
