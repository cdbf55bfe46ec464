"""Constrained solver on problems with known KKT solutions."""

import numpy as np
import pytest

from packmhe.nlp import (NlpProblem, SolverOptions, SolverStatus,
                         check_gradients, minimize)


def quadratic_cost(Q, c):
    def cost(x):
        return 0.5 * x @ Q @ x + c @ x, Q @ x + c
    return cost


def test_active_bound_kkt():
    """min (x-1)^2 with x >= 2 sits on the bound."""
    prob = NlpProblem(
        dim=1,
        cost=lambda x: ((x[0] - 1.0) ** 2, np.array([2.0 * (x[0] - 1.0)])),
        x0=np.array([5.0]),
        lower=np.array([2.0]),
    )
    res = minimize(prob)
    assert res.status is SolverStatus.CONVERGED
    assert res.x[0] == pytest.approx(2.0, abs=1e-8)
    assert res.cost == pytest.approx(1.0, abs=1e-8)


def test_equality_symmetry():
    """min x^2 + y^2 s.t. x + y = 1 -> (0.5, 0.5), multiplier -1."""
    prob = NlpProblem(
        dim=2,
        cost=lambda x: (x @ x, 2.0 * x),
        x0=np.array([3.0, -1.0]),
        eq=lambda x: np.array([x[0] + x[1] - 1.0]),
        eq_jac=lambda x: np.array([[1.0, 1.0]]),
    )
    res = minimize(prob)
    assert res.status is SolverStatus.CONVERGED
    np.testing.assert_allclose(res.x, [0.5, 0.5], atol=1e-7)
    assert res.eq_multipliers[0] == pytest.approx(-1.0, abs=1e-5)


def test_random_equality_qp_vs_kkt_factorization():
    """Convex QP with 8 random equalities matches the KKT linear system."""
    rng = np.random.default_rng(42)
    n, m = 20, 8
    A = rng.normal(size=(n, n))
    Q = A @ A.T + n * np.eye(n)
    c = rng.normal(size=n)
    B = rng.normal(size=(m, n))
    b = rng.normal(size=m)

    kkt = np.block([[Q, B.T], [B, np.zeros((m, m))]])
    sol = np.linalg.solve(kkt, np.concatenate([-c, b]))
    x_star = sol[:n]

    prob = NlpProblem(
        dim=n, cost=quadratic_cost(Q, c), x0=np.zeros(n),
        eq=lambda x: B @ x - b, eq_jac=lambda x: B)
    res = minimize(prob)
    assert res.status is SolverStatus.CONVERGED
    np.testing.assert_allclose(res.x, x_star, atol=1e-7)
    np.testing.assert_allclose(res.eq_multipliers, sol[n:], atol=1e-4)


def test_inequality_activation():
    """min (x+2)^2 + (y-1)^2 s.t. x >= 0 via g(x) = -x <= 0."""
    prob = NlpProblem(
        dim=2,
        cost=lambda x: ((x[0] + 2.0) ** 2 + (x[1] - 1.0) ** 2,
                        np.array([2.0 * (x[0] + 2.0), 2.0 * (x[1] - 1.0)])),
        x0=np.array([1.0, 0.0]),
        ineq=lambda x: np.array([-x[0]]),
        ineq_jac=lambda x: np.array([[-1.0, 0.0]]),
    )
    res = minimize(prob)
    assert res.status is SolverStatus.CONVERGED
    np.testing.assert_allclose(res.x, [0.0, 1.0], atol=1e-7)
    assert res.ineq_multipliers[0] == pytest.approx(4.0, abs=1e-4)


def test_vjp_route_matches_jacobian_route():
    B = np.array([[1.0, 2.0, -1.0], [0.0, 1.0, 1.0]])
    b = np.array([1.0, 2.0])
    common = dict(
        dim=3, cost=lambda x: (x @ x, 2.0 * x), x0=np.zeros(3),
        eq=lambda x: B @ x - b)
    res_jac = minimize(NlpProblem(eq_jac=lambda x: B, **common))
    res_vjp = minimize(NlpProblem(eq_vjp=lambda x, v: v @ B, **common))
    np.testing.assert_allclose(res_jac.x, res_vjp.x, atol=1e-10)


def test_monotone_inner_merit():
    """The augmented-Lagrangian merit never increases within an inner solve."""
    rng = np.random.default_rng(1)
    n = 12
    A = rng.normal(size=(n, n))
    Q = A @ A.T + np.eye(n)
    B = rng.normal(size=(3, n))
    prob = NlpProblem(
        dim=n, cost=quadratic_cost(Q, rng.normal(size=n)),
        x0=rng.normal(size=n),
        eq=lambda x: B @ x - 1.0, eq_jac=lambda x: B)
    res = minimize(prob, SolverOptions(log_inner_merit=True))
    assert res.status is SolverStatus.CONVERGED
    assert res.merit_history
    for merits in res.merit_history:
        diffs = np.diff(merits)
        assert np.all(diffs <= 1e-9 * np.maximum(np.abs(merits[:-1]), 1.0))


def test_determinism():
    rng = np.random.default_rng(3)
    n = 15
    A = rng.normal(size=(n, n))
    Q = A @ A.T + np.eye(n)
    c = rng.normal(size=n)
    B = rng.normal(size=(4, n))

    def solve():
        prob = NlpProblem(
            dim=n, cost=quadratic_cost(Q, c), x0=np.zeros(n),
            eq=lambda x: B @ x - 0.5, eq_jac=lambda x: B,
            ineq=lambda x: np.array([x @ x - 10.0]),
            ineq_jac=lambda x: (2.0 * x)[None, :])
        return minimize(prob)

    a, b = solve(), solve()
    np.testing.assert_array_equal(a.x, b.x)
    assert a.iterations == b.iterations


def test_infeasible_reported():
    prob = NlpProblem(
        dim=1, cost=lambda x: (x[0] ** 2, np.array([2.0 * x[0]])),
        x0=np.zeros(1),
        eq=lambda x: np.array([x[0], x[0] - 1.0]),
        eq_jac=lambda x: np.array([[1.0], [1.0]]))
    res = minimize(prob, SolverOptions(max_outer=12))
    assert res.status in (SolverStatus.INFEASIBLE, SolverStatus.MAX_ITER)
    assert res.max_eq_violation > 1e-3


def test_nan_reported_as_numerical_failure():
    def bad_cost(x):
        return np.nan, np.zeros(2)
    res = minimize(NlpProblem(dim=2, cost=bad_cost, x0=np.zeros(2)))
    assert res.status is SolverStatus.NUMERICAL_FAILURE
    assert "cost" in res.message


def test_trace_csv(tmp_path):
    path = tmp_path / "iters.csv"
    prob = NlpProblem(
        dim=2, cost=lambda x: (x @ x, 2.0 * x), x0=np.ones(2),
        eq=lambda x: np.array([x[0] + x[1] - 1.0]),
        eq_jac=lambda x: np.array([[1.0, 1.0]]))
    minimize(prob, SolverOptions(trace_path=str(path)))
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("outer,cost")
    assert len(lines) >= 2


# --- gradient checker ---

def test_check_gradients_quadratic_exact():
    rng = np.random.default_rng(7)
    Q = np.diag(rng.uniform(0.5, 2.0, size=6))
    prob = NlpProblem(
        dim=6, cost=quadratic_cost(Q, np.zeros(6)), x0=np.zeros(6),
        eq=lambda x: np.array([np.sum(x) - 1.0]),
        eq_jac=lambda x: np.ones((1, 6)))
    report = check_gradients(prob, rng.normal(size=6))
    assert report["max"] <= 1e-9


def test_check_gradients_flags_corruption():
    def corrupted(x):
        g = 2.0 * x
        g[3] += 1.0  # deliberately wrong component
        return x @ x, g
    prob = NlpProblem(dim=5, cost=corrupted, x0=np.zeros(5))
    report = check_gradients(prob, np.full(5, 0.3))
    err, idx = report["cost"]
    assert err > 0.1
    assert idx[-1] == 3
