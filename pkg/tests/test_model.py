import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hivoc import model
from hivoc.model import CostParams, ModelParams, N_STATE, state_vector

nonneg_state = arrays(float, N_STATE, elements=st.floats(0.0, 1e5))
nonneg_control = arrays(float, 2, elements=st.floats(0.0, 0.5))


def test_mixing_no_infecteds_gives_zero_force(params):
    X = state_vector(S_H=500, S_L=4000, T_H=10, P=30)
    mix = model.mixing_rates(X, params)
    assert mix.phi_H == 0 and mix.phi_L == 0


def test_mixing_hand_example(params):
    # sigma = lambda_H beta_A I_AH / (lambda_H N_H) = 0.015 * 10 / 100
    X = state_vector(S_H=90, I_AH=10)
    mix = model.mixing_rates(X, params.replace(pi=0.0))
    assert mix.sigma == pytest.approx(0.0015, rel=1e-14)
    assert mix.phi_H == pytest.approx(40.9 * 0.0015, rel=1e-14)
    assert model.incidence_cost(X, params) == pytest.approx(90 * 0.06135, rel=1e-13)


def test_pure_within_group_mixing(params):
    p = params.replace(pi=1.0)
    X = state_vector(S_H=300, S_L=2000, I_AH=20, I_AL=15, I_CH=40, I_CL=60, T_H=5, P=7)
    mix = model.mixing_rates(X, p)
    _, N_H, N_L = model.totals(X)
    assert mix.phi_H == pytest.approx(p.lambda_H * (p.beta_A * 20 + p.beta_C * 40) / N_H, rel=1e-13)
    assert mix.phi_L == pytest.approx(p.lambda_L * (p.beta_A * 15 + p.beta_C * 60) / N_L, rel=1e-13)


def test_enrollment_examples(params):
    assert model.enrollment_fractions(state_vector(S_L=10, I_CH=3), params).zeta_P == 0
    X = state_vector(S_H=20, I_AH=30, S_L=50)
    assert model.enrollment_fractions(X, params.replace(r_b=4.0)).zeta_P == pytest.approx(0.32)
    X = state_vector(S_H=20, S_L=70, I_CL=10)
    assert model.enrollment_fractions(X, params.replace(r_b=1.0)).zeta_P == pytest.approx(0.2)


def test_rhs_empty_population(params):
    d = model.rhs(0.0, np.zeros(N_STATE), np.zeros(2), params)
    expected = np.zeros(N_STATE)
    expected[[model.S_H, model.S_L]] = [params.alpha_H, params.alpha_L]
    np.testing.assert_array_equal(d, expected)


def test_budget_rate_example():
    X = state_vector(S_H=800, T_H=60, T_L=40, P=50, S_L=50)
    assert X.sum() == 1000
    B = model.budget_rate(X, np.array([0.002, 0.001]), CostParams(1299, 776, 266, 213))
    assert B == pytest.approx(169392.0, rel=1e-14)
    assert model.budget_rate(np.zeros(N_STATE), np.zeros(2), CostParams()) == 0


def test_budget_rate_zero_control_ignores_enrollment_costs():
    X = state_vector(S_H=800, T_H=60, T_L=40, P=50)
    a = model.budget_rate(X, np.zeros(2), CostParams(K_T_enroll=1.0, K_P_enroll=2.0))
    b = model.budget_rate(X, np.zeros(2), CostParams(K_T_enroll=900.0, K_P_enroll=700.0))
    assert a == b


@given(nonneg_state, nonneg_control)
def test_population_balance(X, u):
    p = ModelParams()
    total = model.rhs(0.0, X, u, p).sum()
    expected = model.population_balance(X, p)
    assert expected == pytest.approx(p.alpha_H + p.alpha_L - p.mu * X.sum()
                                     - p.delta_C * (X[model.I_CH] + X[model.I_CL]))
    flows = p.alpha_H + p.alpha_L + p.mu * X.sum() + 50 * np.abs(model.rhs(0.0, X, u, p)).sum()
    assert abs(total - expected) <= 1e-10 * flows


@given(nonneg_state, st.floats(1e-3, 1e3))
def test_fractions_scale_invariant(X, c):
    p = ModelParams()
    a, b = model.mixing_rates(X, p), model.mixing_rates(c * X, p)
    assert b.phi_H == pytest.approx(a.phi_H, rel=1e-9, abs=1e-300)
    assert b.phi_L == pytest.approx(a.phi_L, rel=1e-9, abs=1e-300)
    za, zb = model.enrollment_fractions(X, p), model.enrollment_fractions(c * X, p)
    assert zb.zeta_P == pytest.approx(za.zeta_P, rel=1e-9, abs=1e-300)


@given(nonneg_state)
def test_mixing_invariants(X):
    p = ModelParams(pi=0.3)
    mix = model.mixing_rates(X, p)
    if mix.theta > 0:
        assert mix.eta_H + mix.eta_L == pytest.approx(1.0)
    assert mix.phi_H == mix.psi_H + mix.tau_H and mix.phi_L == mix.psi_L + mix.tau_L
    for f in ("sigma", "tau_H", "tau_L", "psi_H", "psi_L", "phi_H", "phi_L"):
        assert getattr(mix, f) >= 0


@given(nonneg_state, nonneg_control)
def test_costs_nonnegative(X, u):
    assert model.incidence_cost(X, ModelParams()) >= 0
    assert model.budget_rate(X, u, CostParams()) >= 0


@given(nonneg_state)
def test_enrollment_zero_iff(X):
    z = model.enrollment_fractions(X, ModelParams())
    assert 0 <= z.zeta_P <= 1
    if X.sum() > 0:
        assert (z.zeta_P == 0) == (X[model.S_H] == 0)
        assert (z.zeta_TH == 0) == (X[model.I_CH] == 0)
        assert (z.zeta_TL == 0) == (X[model.I_CL] == 0)


@given(nonneg_state.filter(lambda X: X.sum() > 1.0), nonneg_control)
def test_rhs_jacobian_matches_differences(X, u):
    from hivoc.sqp import fd_jacobian
    p = ModelParams(pi=0.2, rho_H=0.01, rho_L=0.002, x=1 / 24, y=0.01)
    X = X + 1.0   # keep denominators away from zero
    Jx, Ju = model.rhs_jacobian(X, u, p)
    Fx = fd_jacobian(lambda z: model.rhs(0.0, z, u, p), X, 1e-6)
    Fu = fd_jacobian(lambda v: model.rhs(0.0, X, v, p), u, 1e-6)
    scale = np.abs(model.rhs(0.0, X, u, p)).max() / X.max() + np.abs(Jx).max()
    assert np.max(np.abs(Jx - Fx)) <= 1e-5 * scale
    assert np.max(np.abs(Ju - Fu)) <= 1e-5 * max(np.abs(Ju).max(), 1.0)


def test_face_S_H_inflow(params):
    X = state_vector(S_L=200, I_AH=3, P=40)
    p = params.replace(rho_L=0.01, x=0.1)
    d = model.rhs(0.0, X, np.array([0.3, 0.2]), p)
    assert d[model.S_H] == pytest.approx(p.alpha_H + p.rho_L * 200 + p.x * 40)


def test_essential_nonnegativity(params):
    assert model.check_essential_nonnegativity(params, 10_000).ok


def test_essential_nonnegativity_witnesses_bad_rate(params):
    report = model.check_essential_nonnegativity(params.replace(rho_L=-1.0), 2000)
    assert not report.ok
    assert any(v[0] == "S_H" for v in report.violations)


def test_params_validation():
    with pytest.raises(ValueError):
        ModelParams(mu=-1.0).validate()
    with pytest.raises(ValueError):
        ModelParams(beta_A=1.5).validate()
    with pytest.raises(ValueError):
        ModelParams(r_b=0.0).validate()
    with pytest.raises(ValueError):
        CostParams(K_T_treat=-1.0).validate()
