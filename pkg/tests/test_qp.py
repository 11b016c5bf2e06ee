import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import enumerate_active_sets
from sddf.qp import INFEASIBLE, OPTIMAL, QpError, QpProblem, QpSolution, solve_qp, verify_kkt


def test_scalar_active_bound():
    sol = solve_qp(QpProblem([[2.0]], [0.0], ineq_matrix=[[-1.0]], ineq_rhs=[-1.0]))
    assert sol.status == OPTIMAL
    assert sol.primal[0] == pytest.approx(1.0, abs=1e-8)
    assert sol.dual_ineq[0] == pytest.approx(2.0, abs=1e-7)


def test_equality_symmetry():
    sol = solve_qp(QpProblem(2 * np.eye(2), [-2.0, -2.0], eq_matrix=[[1.0, 1.0]], eq_rhs=[1.0]))
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.primal, [0.5, 0.5], atol=1e-9)


@pytest.mark.parametrize("seed", range(8))
def test_random_qp_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(5, 5))
    P = L @ L.T + 0.1 * np.eye(5)
    q = rng.normal(size=5)
    A = rng.normal(size=(3, 5))
    d = rng.normal(size=3)
    sol = solve_qp(QpProblem(P, q, ineq_matrix=A, ineq_rhs=d))
    f, z = enumerate_active_sets(P, q, np.zeros((0, 5)), np.zeros(0), A, d)
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.primal, z, atol=1e-8)
    assert sol.objective == pytest.approx(f, abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(0, 6), st.integers(0, 2))
def test_small_qp_oracle_property(seed, n, mi, me):
    rng = np.random.default_rng(seed)
    me = min(me, n - 1)
    L = rng.normal(size=(n, n))
    P = L @ L.T + 0.05 * np.eye(n)
    q = rng.normal(size=n)
    z0 = rng.normal(size=n)  # guarantees feasibility
    E = rng.normal(size=(me, n))
    A = rng.normal(size=(mi, n))
    b, d = E @ z0, A @ z0 + rng.uniform(0, 1, mi)
    sol = solve_qp(QpProblem(P, q, eq_matrix=E, eq_rhs=b, ineq_matrix=A, ineq_rhs=d))
    f, z = enumerate_active_sets(P, q, E, b, A, d)
    assert sol.status == OPTIMAL
    np.testing.assert_allclose(sol.primal, z, atol=1e-6)


def test_kkt_of_optimum_is_zero():
    prob = QpProblem([[2.0]], [0.0], ineq_matrix=[[-1.0]], ineq_rhs=[-1.0])
    sol = solve_qp(prob)
    rep = verify_kkt(prob, sol)
    assert rep.ok
    exact = QpSolution(np.array([1.0]), np.zeros(0), np.array([2.0]), OPTIMAL, 0)
    rep = verify_kkt(prob, exact)
    assert rep.max_residual == 0.0


def test_kkt_detects_perturbation():
    prob = QpProblem([[2.0]], [0.0], ineq_matrix=[[-1.0]], ineq_rhs=[-1.0])
    bad = QpSolution(np.array([1.001]), np.zeros(0), np.array([2.0]), OPTIMAL, 0)
    rep = verify_kkt(prob, bad)
    assert rep.stationarity > 0
    assert not rep.ok


def test_non_psd_rejected():
    with pytest.raises(QpError):
        solve_qp(QpProblem([[1.0, 0.0], [0.0, -1.0]], [0.0, 0.0]))


def test_shape_mismatch_rejected():
    with pytest.raises(QpError):
        QpProblem(np.eye(2), [0.0, 0.0], ineq_matrix=np.ones((2, 2)), ineq_rhs=[1.0])


def test_infeasible_reported():
    # z <= -1 and z >= 1
    sol = solve_qp(QpProblem([[2.0]], [0.0], ineq_matrix=[[1.0], [-1.0]], ineq_rhs=[-1.0, -1.0]))
    assert sol.status == INFEASIBLE
    assert sol.max_violation > 0


def test_deterministic():
    rng = np.random.default_rng(3)
    L = rng.normal(size=(6, 6))
    prob = QpProblem(L @ L.T, rng.normal(size=6), ineq_matrix=rng.normal(size=(4, 6)), ineq_rhs=np.ones(4))
    a, b = solve_qp(prob), solve_qp(prob)
    assert np.array_equal(a.primal, b.primal)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_objective_invariant_under_row_permutation(seed):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(5, 5))
    P = L @ L.T + 0.1 * np.eye(5)
    q = rng.normal(size=5)
    A = rng.normal(size=(6, 5))
    d = rng.uniform(0.1, 1.0, 6)
    perm = rng.permutation(6)
    s1 = solve_qp(QpProblem(P, q, ineq_matrix=A, ineq_rhs=d))
    s2 = solve_qp(QpProblem(P, q, ineq_matrix=A[perm], ineq_rhs=d[perm]))
    assert s1.status == s2.status == OPTIMAL
    assert s2.objective == pytest.approx(s1.objective, rel=1e-8, abs=1e-10)


def test_bounds_and_duals():
    # min (z - 2)^2 with z <= 1: z = 1, upper multiplier 2
    sol = solve_qp(QpProblem([[2.0]], [-4.0], upper=[1.0]))
    assert sol.status == OPTIMAL
    assert sol.primal[0] == pytest.approx(1.0, abs=1e-8)
    assert sol.dual_upper[0] == pytest.approx(2.0, abs=1e-6)
