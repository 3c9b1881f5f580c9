import numpy as np
import pytest
from scipy.sparse.linalg import LinearOperator

from embie.linalg import (IterationLog, condition_number, gmres,
                          scaled_operator, weight_scale)


def _random_system(n, seed=0, shift=4.0):
    rng = np.random.default_rng(seed)
    A = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / np.sqrt(n)
    A += shift * np.eye(n)
    b = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    return A, b


def test_gmres_identity_converges_in_one_iteration():
    b = np.arange(1.0, 6.0) + 0j
    x, log = gmres(np.eye(5), b, tol=1e-14)
    assert log.converged
    assert log.iterations == 1
    assert np.allclose(x, b, atol=1e-14)


def test_gmres_dense_complex_system():
    A, b = _random_system(60)
    x, log = gmres(A, b, tol=1e-12)
    assert log.converged
    assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) < 1e-11


def test_gmres_residual_history_monotone_and_matches_final():
    A, b = _random_system(40, seed=1)
    x, log = gmres(A, b, tol=1e-10)
    r = np.array(log.residuals)
    assert np.all(np.diff(r) <= 1e-14)
    true = np.linalg.norm(A @ x - b) / np.linalg.norm(b)
    assert abs(true - r[-1]) < 1e-9


def test_gmres_matrix_free_operator_matches_dense():
    A, b = _random_system(50, seed=2)
    op = LinearOperator(A.shape, matvec=lambda v: A @ v, dtype=complex)
    xd, _ = gmres(A, b, tol=1e-12)
    xo, log = gmres(op, b, tol=1e-12)
    assert log.converged
    assert np.linalg.norm(xd - xo) < 1e-10


def test_gmres_restarted_still_converges():
    A, b = _random_system(80, seed=3, shift=6.0)
    x, log = gmres(A, b, tol=1e-10, restart=15, maxiter=400)
    assert log.converged
    assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) < 1e-9


def test_gmres_zero_rhs_returns_zero():
    x, log = gmres(np.eye(4), np.zeros(4), tol=1e-12)
    assert log.converged and log.iterations == 0
    assert np.all(x == 0)


def test_gmres_initial_guess_exact_solution():
    A, b = _random_system(20, seed=4)
    xstar = np.linalg.solve(A, b)
    x, log = gmres(A, b, tol=1e-12, x0=xstar)
    assert log.converged
    assert log.iterations <= 1


def test_gmres_lucky_breakdown_gives_exact_answer():
    # rank-deficient Krylov space: b is an eigenvector after 2 steps
    A = np.diag([2.0, 3.0, 5.0, 7.0]).astype(complex)
    b = np.array([1.0, 1.0, 0.0, 0.0], dtype=complex)
    x, log = gmres(A, b, tol=1e-14)
    assert log.converged
    assert log.iterations <= 2
    assert np.linalg.norm(A @ x - b) < 1e-13


def test_gmres_nonconvergence_reported():
    A, b = _random_system(50, seed=5, shift=0.0)
    _, log = gmres(A, b, tol=1e-14, maxiter=3)
    assert not log.converged
    assert log.iterations == 3


def test_gmres_wall_time_recorded():
    A, b = _random_system(30, seed=6)
    _, log = gmres(A, b, tol=1e-10)
    assert isinstance(log, IterationLog)
    assert log.wall_time > 0


def test_weight_scale_is_similarity_transform():
    rng = np.random.default_rng(7)
    n = 12
    A = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    w = rng.uniform(0.5, 2.0, n)
    B = weight_scale(A, w)
    # same spectrum
    ea = np.sort_complex(np.linalg.eigvals(A))
    eb = np.sort_complex(np.linalg.eigvals(B))
    assert np.allclose(ea, eb, atol=1e-10)
    s = np.sqrt(w)
    assert np.allclose(B, A * s[:, None] / s[None, :])


def test_weight_scale_leaves_constants_rows_unscaled():
    rng = np.random.default_rng(8)
    n, nc = 6, 2
    A = rng.standard_normal((n + nc, n + nc))
    w = rng.uniform(0.5, 2.0, n)
    B = weight_scale(A, w, n_constants=nc)
    assert np.allclose(B[n:, n:], A[n:, n:])
    assert np.allclose(B[n:, :n], A[n:, :n] / np.sqrt(w)[None, :])
    assert np.allclose(B[:n, n:], A[:n, n:] * np.sqrt(w)[:, None])


def test_weight_scale_rejects_nonpositive_weights():
    A = np.eye(3)
    with pytest.raises(ValueError):
        weight_scale(A, np.array([1.0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        weight_scale(A, np.array([1.0, -1.0, 1.0]))
    with pytest.raises(ValueError):
        weight_scale(np.eye(4), np.ones(2), n_constants=1)


def test_scaled_operator_matches_dense_scaling():
    rng = np.random.default_rng(9)
    n = 10
    A = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    w = rng.uniform(0.5, 2.0, n)
    B = weight_scale(A, w)
    op = scaled_operator(A, w)
    v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    assert np.allclose(op.matvec(v), B @ v, atol=1e-12)


def test_condition_number():
    assert abs(condition_number(np.eye(5)) - 1.0) < 1e-12
    A = np.diag([10.0, 1.0, 0.5])
    assert abs(condition_number(A) - 20.0) < 1e-10
    assert condition_number(np.zeros((3, 3))) == np.inf
