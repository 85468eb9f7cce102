import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import lsq_linear

from hivoc import model
from hivoc.model import ModelParams, state_vector
from hivoc.sqp import (Multipliers, NlpProblem, SolverOptions, fd_jacobian, kkt_residual, solve,
                       violation)

TIGHT = SolverOptions(tol_constraint=1e-10, tol_kkt=1e-10)


def bound_problem():
    return NlpProblem(1, f=lambda x: x[0] ** 2, grad=lambda x: 2 * x, lb=np.array([1.0]))


def equality_problem():
    return NlpProblem(2, f=lambda x: (x[0] - 2) ** 2 + (x[1] - 1) ** 2,
                      grad=lambda x: np.array([2 * (x[0] - 2), 2 * (x[1] - 1)]),
                      eq=lambda x: np.array([x[0] + x[1] - 2]),
                      jac_eq=lambda x: np.array([[1.0, 1.0]]))


def disk_problem():
    return NlpProblem(2, f=lambda x: -x[0] * x[1], grad=lambda x: np.array([-x[1], -x[0]]),
                      ineq=lambda x: np.array([x[0] ** 2 + x[1] ** 2 - 2]),
                      jac_ineq=lambda x: np.array([[2 * x[0], 2 * x[1]]]), lb=np.zeros(2))


CLOSED_FORM = [
    (bound_problem, [5.0], [1.0], 1.0),
    (equality_problem, [0.0, 0.0], [1.5, 0.5], 0.5),
    (disk_problem, [0.5, 1.5], [1.0, 1.0], -1.0),
]


@pytest.mark.parametrize("make, x0, x_star, f_star", CLOSED_FORM)
def test_closed_form_optima(make, x0, x_star, f_star):
    r = solve(make(), np.array(x0), TIGHT)
    assert r.converged, r.message
    assert r.iterations <= 20
    np.testing.assert_allclose(r.x, x_star, atol=1e-8)
    assert r.fun == pytest.approx(f_star, abs=1e-8)
    assert kkt_residual(make(), r.x, r.multipliers) <= 1e-8
    assert r.violation <= TIGHT.tol_constraint and r.kkt <= TIGHT.tol_kkt


def test_kkt_residual_far_from_optimum():
    p = equality_problem()
    zero = Multipliers(np.zeros(1), np.zeros(0), np.zeros(2), np.zeros(2))
    assert kkt_residual(p, np.array([5.0, 5.0]), zero) > 1e-5


def test_inactive_multiplier_has_no_complementarity():
    p = NlpProblem(1, f=lambda x: (x[0] - 3) ** 2, grad=lambda x: 2 * (x - 3),
                   ineq=lambda x: np.array([x[0] - 10.0]), jac_ineq=lambda x: np.array([[1.0]]))
    mult = Multipliers(np.zeros(0), np.zeros(1), np.zeros(1), np.zeros(1))
    assert kkt_residual(p, np.array([3.0]), mult) == 0.0


def test_fd_jacobian_linear_and_quadratic():
    A = np.arange(12.0).reshape(3, 4) - 5
    x = np.array([0.3, -1.0, 2.0, 0.5])
    np.testing.assert_allclose(fd_jacobian(lambda v: A @ v, x), A, atol=1e-10)
    J = fd_jacobian(lambda v: np.array([v[0] ** 2, v[1] * v[2], 3 * v[3]]), np.zeros(4))
    np.testing.assert_allclose(J[:2], 0.0, atol=1e-12)


def test_fd_jacobian_respects_sparsity():
    calls = []

    def fun(v):
        calls.append(1)
        return np.array([v[0] ** 2, np.sin(v[1]), v[2] * v[3], v[4]])

    S = np.zeros((4, 5), bool)
    S[0, 0] = S[1, 1] = S[2, 2] = S[2, 3] = S[3, 4] = True
    x = np.array([1.0, 0.5, -2.0, 3.0, 0.1])
    J = fd_jacobian(fun, x, 1e-6, S)
    sparse_calls = len(calls)
    dense = fd_jacobian(fun, x, 1e-6)
    np.testing.assert_allclose(J.toarray(), dense, atol=1e-8)
    assert sparse_calls == 4   # two column groups, each perturbed both ways


def test_fd_jacobian_of_rhs_against_hand_derivative():
    """d(dS_H/dt)/dP with random mixing: x - S_H dphi_H/dP - u_P d(zeta_P N)/dP."""
    p = ModelParams(x=1 / 24)
    X = state_vector(S_H=900, S_L=8000, I_AH=40, I_AL=70, I_CH=120, I_CL=300, T_H=20, T_L=35, P=60)
    u = np.array([2e-3, 1e-3])
    _, N_H, N_L = model.totals(X)
    theta = p.lambda_H * N_H + p.lambda_L * N_L
    load = (p.beta_A * (p.lambda_H * X[2] + p.lambda_L * X[3])
            + p.beta_C * (p.lambda_H * X[4] + p.lambda_L * X[5]))
    dphi_H = -p.lambda_H * load * p.lambda_H / theta ** 2
    Z = p.r_b * N_H + N_L
    N = X.sum()
    dflow = p.r_b * X[0] * (Z - N * p.r_b) / Z ** 2
    hand = p.x - X[0] * dphi_H - u[0] * dflow
    J = fd_jacobian(lambda v: model.rhs(0.0, v, u, p), X, 1e-6)
    assert J[model.S_H, model.P] == pytest.approx(hand, rel=1e-6)


def test_merit_non_increasing_and_history():
    r = solve(disk_problem(), np.array([0.5, 1.5]), TIGHT)
    assert r.history
    for h in r.history:
        if h.get("alpha"):
            assert h["merit_after"] <= h["merit_before"] + 1e-12 * max(1.0, abs(h["merit_before"]))


def test_deterministic():
    a = solve(disk_problem(), np.array([0.2, 1.7]), TIGHT)
    b = solve(disk_problem(), np.array([0.2, 1.7]), TIGHT)
    np.testing.assert_array_equal(a.x, b.x)
    assert [h["f"] for h in a.history] == [h["f"] for h in b.history]


def test_fd_gradient_and_jacobian_fallback():
    p = NlpProblem(2, f=lambda x: (x[0] - 2) ** 2 + (x[1] - 1) ** 2,
                   eq=lambda x: np.array([x[0] + x[1] - 2]))
    r = solve(p, np.zeros(2), SolverOptions(tol_constraint=1e-9, tol_kkt=1e-7))
    assert r.converged
    np.testing.assert_allclose(r.x, [1.5, 0.5], atol=1e-6)


def test_fd_hessian_option():
    r = solve(disk_problem(), np.array([0.5, 1.5]),
              SolverOptions(tol_constraint=1e-10, tol_kkt=1e-9, hessian="fd"))
    assert r.converged
    np.testing.assert_allclose(r.x, [1.0, 1.0], atol=1e-8)


def test_inconsistent_linearisation_uses_elastic_mode():
    # at x = 0 the linearised constraint 1 - x^2 <= 0 reads 1 <= 0
    p = NlpProblem(1, f=lambda x: (x[0] - 2) ** 2, grad=lambda x: 2 * (x - 2),
                   ineq=lambda x: np.array([1 - x[0] ** 2]), jac_ineq=lambda x: np.array([[-2 * x[0]]]))
    r = solve(p, np.array([0.0]), TIGHT)
    assert r.converged
    assert r.x[0] == pytest.approx(2.0, abs=1e-8)


def test_infeasible_problem_reports_status():
    p = NlpProblem(1, f=lambda x: x[0] ** 2, grad=lambda x: 2 * x,
                   ineq=lambda x: np.array([1 - x[0], x[0] + 1]),
                   jac_ineq=lambda x: np.array([[-1.0], [1.0]]))
    r = solve(p, np.array([0.0]), SolverOptions(max_iter=50))
    assert not r.converged
    assert r.status in ("infeasible", "line-search-failure", "max-iter")
    assert violation(p, r.x) > 1e-6


def test_start_outside_bounds_is_projected():
    r = solve(bound_problem(), np.array([-4.0]), TIGHT)
    assert r.converged and r.x[0] == pytest.approx(1.0, abs=1e-10)


def test_options_validate():
    with pytest.raises(ValueError):
        SolverOptions(tol_kkt=0.0)
    with pytest.raises(ValueError):
        SolverOptions(hessian="newton")
    with pytest.raises(ValueError):
        NlpProblem(2, f=lambda x: 0.0, lb=np.ones(2), ub=np.zeros(2))


@settings(max_examples=25)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_convex_box_qp_against_bounded_least_squares(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n + 2, n))
    b = rng.normal(size=n + 2)
    lb = rng.uniform(-1.0, 0.0, n)
    ub = lb + rng.uniform(0.1, 1.0, n)
    ref = lsq_linear(A, b, bounds=(lb, ub), tol=1e-14, lsmr_tol="auto", method="bvls").x
    p = NlpProblem(n, f=lambda x: 0.5 * np.sum((A @ x - b) ** 2), grad=lambda x: A.T @ (A @ x - b),
                   lb=lb, ub=ub)
    r = solve(p, 0.5 * (lb + ub), TIGHT)
    assert r.converged and r.iterations <= 20
    np.testing.assert_allclose(r.x, ref, atol=1e-8)


@settings(max_examples=25)
@given(st.integers(2, 6), st.integers(1, 2), st.integers(0, 2**31 - 1))
def test_convex_equality_qp_against_kkt_solve(n, m, seed):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(n, n))
    Q = L @ L.T + 0.1 * np.eye(n)
    c = rng.normal(size=n)
    E = rng.normal(size=(m, n))
    d = rng.normal(size=m)
    K = np.block([[Q, E.T], [E, np.zeros((m, m))]])
    ref = np.linalg.solve(K, np.concatenate([-c, d]))[:n]
    p = NlpProblem(n, f=lambda x: 0.5 * x @ Q @ x + c @ x, grad=lambda x: Q @ x + c,
                   eq=lambda x: E @ x - d, jac_eq=lambda x: E)
    r = solve(p, np.zeros(n), TIGHT)
    assert r.converged and r.iterations <= 20
    np.testing.assert_allclose(r.x, ref, atol=1e-8 * max(1.0, np.abs(ref).max()))
