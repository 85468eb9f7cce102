import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hivoc import model, oracle
from hivoc.model import N_STATE, state_vector
from hivoc.oracle import ControlSchedule, integrate
from hivoc.sqp import fd_jacobian
from hivoc.transcribe import (DecisionLayout, baseline_residuals, budget_inequality, build_grid,
                              build_nlp, collocation_residuals, continuity_defect, propagated_endpoint)

ONES = lambda X, u: np.ones_like(X)
ZEROS = lambda X, u: np.zeros_like(X)


def oracle_point(nlp, schedule):
    ctrl = integrate(nlp.params, nlp.X0, schedule)
    bases = oracle.baseline_trajectories(nlp.params, ctrl, schedule)
    return nlp.pack_trajectories(ctrl, bases, schedule)


@pytest.fixture(scope="module")
def small(params, costs, X0):
    return build_nlp(build_grid(2, 12.0, 5), params, costs, X0, 5e6)


def test_grid():
    g = build_grid(50, 12.0, 5)
    assert g.t_f == 600.0
    assert g.tau[0, 0] == 0.0 and g.tau[3, 0] == 36.0
    assert np.all(np.diff(g.tau, axis=1) > 0)
    assert build_grid(1, 12.0, 3).n_int == 1
    with pytest.raises(ValueError):
        build_grid(3, 12.0, 1)


def test_counts(params, costs, X0):
    nlp = build_nlp(build_grid(2, 12.0, 3), params, costs, X0, 1e6)
    z = nlp.initial_guess()
    assert nlp.size == 148 and z.size == 148
    assert nlp.eq_constraints(z).size == 144 == nlp.n_eq
    assert nlp.ineq_constraints(z).size == 2
    one = build_nlp(build_grid(1, 12.0, 3), params, costs, X0, 1e6)
    assert one.n_eq == 9 + 9 * 3 * 2 + 9


@given(st.integers(1, 4), st.integers(2, 6), st.data())
def test_layout_round_trip(n_int, n_pts, data):
    lay = DecisionLayout(n_int, n_pts)
    z = data.draw(arrays(float, lay.size, elements=st.floats(-1e3, 1e3)))
    np.testing.assert_array_equal(lay.pack(*lay.unpack(z)), z)
    idx = np.concatenate([lay.state_index.ravel(), lay.baseline_index.ravel(), lay.control_index.ravel()])
    np.testing.assert_array_equal(np.sort(idx), np.arange(lay.size))


@pytest.mark.parametrize("n_cp", [1, 3, 6])
def test_scalar_linear_solution(n_cp):
    g = build_grid(2, 3.0, max(n_cp, 2))
    X = g.tau[1][:, None]
    assert np.max(np.abs(collocation_residuals(X, 0.0, g, ONES))) < 1e-11
    assert np.max(np.abs(collocation_residuals(np.ones_like(X), 0.0, g, ZEROS))) < 1e-14


def test_defect_constant_rhs():
    g = build_grid(1, 2.0, 4)
    X = np.full((5, 1), 3.0)
    assert propagated_endpoint(X, 0.0, g, ONES)[0] == pytest.approx(5.0, abs=1e-14)
    assert continuity_defect(X, 0.0, [3.0], g, ZEROS)[0] == 0.0


def test_baseline_residuals_zero_rhs():
    g = build_grid(1, 12.0, 3)
    X = np.full((4, 1), 2.0)
    res, anchor = baseline_residuals(X, X, g, ZEROS)
    assert np.max(np.abs(res)) < 1e-14 and np.all(anchor == 0)


def test_budget_inequality_examples(costs):
    g = build_grid(1, 12.0, 5)
    X = np.tile(state_vector(S_H=900, S_L=9000, T_H=30, T_L=20, P=10), (6, 1))
    assert budget_inequality(X, X, np.zeros(2), g, costs, 1e4) == pytest.approx(-1e4)
    assert budget_inequality(X, X, np.zeros(2), g, costs, 0.0) == pytest.approx(0.0, abs=1e-8)
    u = np.array([2e-3, 1e-3])
    expected = 12.0 * (model.budget_rate(X[0], u, costs) - model.budget_rate(X[0], np.zeros(2), costs)) - 7.0
    assert budget_inequality(X, X, u, g, costs, 7.0) == pytest.approx(expected, rel=1e-12)


def test_objective_simple_cases(params, costs):
    X0 = state_vector(S_H=900, S_L=9000, I_AH=10, I_CL=40)
    nlp = build_nlp(build_grid(1, 12.0, 5), params, costs, X0, 1e5)
    const = nlp.pack(np.tile(X0, (1, 6, 1)), np.tile(X0, (1, 6, 1)), np.zeros((1, 2)))
    assert nlp.unscaled_objective(const) == pytest.approx(12.0 * model.incidence_cost(X0, params))
    clean = state_vector(S_H=900, S_L=9000, P=3)
    nlp0 = build_nlp(build_grid(1, 12.0, 5), params, costs, clean, 1e5)
    z = nlp0.pack(np.tile(clean, (1, 6, 1)), np.tile(clean, (1, 6, 1)), np.ones((1, 2)))
    assert nlp0.objective(z) == 0.0
    assert np.all(nlp0.objective_gradient(z)[nlp0.control_columns] == 0.0)


def test_objective_matches_oracle_integral(params, costs, X0):
    nlp = build_nlp(build_grid(10, 12.0, 5), params, costs, X0, 1e7)
    sched = ControlSchedule.constant(10, 12.0, 2e-3, 2e-3)
    z = oracle_point(nlp, sched)
    ev = oracle.evaluate_policy(params, costs, X0, sched, 1e7)
    assert nlp.unscaled_objective(z) == pytest.approx(ev.total_cost, rel=1e-4)


def test_gradient_scales_with_weights(small):
    g = small.grid
    scheme = dataclasses.replace(g.scheme, weights=3.0 * g.scheme.weights)
    scaled = build_nlp(dataclasses.replace(g, scheme=scheme), small.params, small.costs, small.X0, small.B_lim)
    z = small.initial_guess()
    np.testing.assert_allclose(scaled.objective_gradient(z), 3.0 * small.objective_gradient(z), rtol=1e-13)


@settings(max_examples=10)
@given(arrays(float, (2, 2), elements=st.floats(0.0, 5e-3)))
def test_gradient_matches_differences(small, U):
    z = small.solve_states(U)
    g = small.objective_gradient(z)
    fd = fd_jacobian(lambda v: np.atleast_1d(small.objective(v)), z, 1e-6)[0]
    assert np.max(np.abs(g - fd)) <= 1e-6 * np.max(np.abs(g))


def test_constraint_jacobians_match_differences(small):
    z = small.solve_states(np.array([[2e-3, 1e-3], [1e-3, 3e-3]]))
    z = z + 1e-3 * np.sin(np.arange(z.size))
    Je, Ji = small.eq_jacobian(z), small.ineq_jacobian(z)
    Fe = fd_jacobian(small.eq_constraints, z, 1e-7, small.eq_sparsity)
    Fi = fd_jacobian(small.ineq_constraints, z, 1e-7)
    assert abs(Je - Fe).max() <= 1e-6 * abs(Je).max()
    assert np.max(np.abs(Ji.toarray() - Fi)) <= 1e-6 * abs(Ji).max()
    # the declared pattern covers every nonzero
    assert ((abs(Je) > 0).astype(int) - (abs(Je) > 0).multiply(small.eq_sparsity)).nnz == 0


def test_oracle_point_satisfies_constraints(params, costs, X0):
    nlp = build_nlp(build_grid(3, 12.0, 5), params, costs, X0, 1e7)
    sched = ControlSchedule(12.0, [[3e-3, 1e-3], [0, 2e-3], [1e-3, 0]])
    z = oracle_point(nlp, sched)
    assert np.max(np.abs(nlp.eq_constraints(z))) <= 1e-4
    # feasibility closure: the oracle's excess spend is within the limit
    ev = oracle.evaluate_policy(params, costs, X0, sched, 1e7)
    assert np.all(ev.excess <= 1e7)
    assert np.all(nlp.ineq_constraints(z) <= 1e-4)


def test_zero_controls_give_minus_limit(small):
    z = small.solve_states(np.zeros((2, 2)))
    np.testing.assert_allclose(small.ineq_constraints(z) * small.budget_scale, -small.B_lim, rtol=1e-9)


def _oracle_residuals(params, X0, u):
    g = build_grid(1, 12.0, 5)
    traj = integrate(params, X0, ControlSchedule(12.0, [u]))
    X = traj(g.tau[0])
    scale = np.abs(X).max(axis=0)
    res = collocation_residuals(X, u, g, params)
    d = continuity_defect(X, u, traj(12.0), g, params)
    return np.max(np.abs(res).max(axis=0) / scale), np.max(np.abs(d) / scale)


def test_collocation_residual_on_oracle_samples(params):
    # interventions switched on at the uncontrolled endemic state
    X_end = oracle.endemic_equilibrium(params)
    res, defect = _oracle_residuals(params, X_end, np.array([1e-3, 1e-3]))
    assert res <= 1e-5 and defect <= 1e-5


def test_collocation_residual_during_outbreak_transient(params, X0):
    # the early outbreak grows ~20%/month; one degree-5 polynomial per year
    # resolves it to a few parts in 1e5 of the population
    g = build_grid(1, 12.0, 5)
    u = np.array([1e-3, 1e-3])
    X = integrate(params, X0, ControlSchedule(12.0, [u]))(g.tau[0])
    assert np.max(np.abs(collocation_residuals(X, u, g, params))) <= 1e-4 * X0.sum()


def test_extract_solution(params, costs, X0):
    nlp = build_nlp(build_grid(4, 12.0, 5), params, costs, X0, 1e7)
    U = np.array([[1e-3, 2e-3], [3e-3, 0], [0, 0], [2e-3, 2e-3]])
    z = nlp.solve_states(U)
    sched, traj = nlp.extract_solution(z)
    X, _, _ = nlp.unpack(z)
    np.testing.assert_array_equal(traj(nlp.grid.knots[:-1]), X[:, 0])
    np.testing.assert_allclose(sched.at(nlp.grid.knots[:-1]), U)
    ref = integrate(params, X0, sched)
    t = np.array([5.0, 17.5, 30.0, 44.0])
    err = np.linalg.norm(traj(t) - ref(t), axis=1) / np.linalg.norm(ref(t), axis=1)
    assert np.max(err) < 1e-3


def test_negative_state_flag(small):
    z = small.solve_states(np.zeros((2, 2)))
    assert not small.negative_excursions(z)
    X, Xb, U = small.unpack(z)
    X[0, 2, 0] = -1.0 * small.N0
    assert small.negative_excursions(small.pack(X, Xb, U))


def test_invalid_inputs(params, costs, X0):
    g = build_grid(1, 12.0, 3)
    with pytest.raises(ValueError):
        build_nlp(g, params, costs, -X0, 1.0)
    with pytest.raises(ValueError):
        build_nlp(g, params, costs, X0[:5], 1.0)
    with pytest.raises(ValueError):
        build_nlp(g, params, costs, X0, -1.0)
