import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from shellopt.errors import FactorizationError, NonConvergenceError
from shellopt.solver import (
    COUNTERS,
    Factorization,
    NewtonSettings,
    factorize,
    newton_solve,
    sparse_solve,
    sparse_solve_transpose,
)


def spd(n, seed=0, density=0.01):
    rng = np.random.default_rng(seed)
    A = sp.random(n, n, density=density, random_state=rng)
    return (A @ A.T + n * sp.identity(n)).tocsc()


def test_identity_solve():
    b = np.arange(5.0)
    assert np.array_equal(sparse_solve(sp.identity(5, format="csc"), b), b)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 60))
def test_residual_accuracy(seed, n):
    rng = np.random.default_rng(seed)
    K = sp.csc_matrix(rng.standard_normal((n, n)) + n * np.eye(n))
    b = rng.standard_normal(n)
    x = sparse_solve(K, b)
    assert np.linalg.norm(K @ x - b) <= 1e-10 * np.linalg.norm(b)
    y = sparse_solve_transpose(K, b)
    assert np.linalg.norm(K.T @ y - b) <= 1e-10 * np.linalg.norm(b)


def test_large_spd_matches_dense():
    K = spd(500)
    b = np.random.default_rng(1).standard_normal(500)
    assert np.allclose(sparse_solve(K, b), np.linalg.solve(K.toarray(), b), rtol=1e-10, atol=1e-12)


def test_factorization_is_reused():
    K = spd(50, seed=2)
    n0 = COUNTERS["factorizations"]
    f = factorize(K)
    assert factorize(K) is f
    sparse_solve(K, np.ones(50))
    sparse_solve_transpose(K, np.ones(50))
    assert COUNTERS["factorizations"] == n0 + 1


def test_singular_matrix_reports_pivot():
    K = sp.diags([1.0, 0.0, 2.0]).tocsc()
    with pytest.raises(FactorizationError) as exc:
        Factorization(K)
    assert exc.value.pivot == 1


def test_newton_zero_iterations_at_solution():
    res = newton_solve(lambda d: (np.zeros(3), sp.identity(3)), np.zeros(3))
    assert res.iterations == 0


def test_newton_linear_problem_one_step():
    K = spd(20, seed=3)
    f = np.ones(20)
    res = newton_solve(lambda d: (K @ d - f, K), np.zeros(20))
    assert res.iterations == 1
    assert np.allclose(K @ res.d, f)


def test_newton_quadratic_convergence():
    # R(d) = d^3 + d - 2 componentwise, root at 1
    res = newton_solve(lambda d: (d**3 + d - 2, sp.diags(3 * d**2 + 1)), np.full(4, 3.0),
                       NewtonSettings(rtol=1e-14, atol=1e-14))
    assert np.allclose(res.d, 1.0)
    h = np.array(res.history)
    k = np.where(h[1:] < 1e-3)[0]
    assert len(k) and h[k[0] + 2] <= 10 * h[k[0] + 1] ** 2 or h[-1] < 1e-13


def test_newton_reports_history_on_failure():
    with pytest.raises(NonConvergenceError) as exc:
        newton_solve(lambda d: (np.atleast_1d(d**2 + 1), sp.diags(2 * d + 1e-3)), np.ones(1),
                     NewtonSettings(max_iter=5))
    assert len(exc.value.history) >= 1


def test_settings_validation():
    with pytest.raises(ValueError):
        NewtonSettings(rtol=0)
    with pytest.raises(ValueError):
        NewtonSettings(line_search="wolfe")
