from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hivoc import model
from hivoc.config import (DEFAULT_X, ConfigError, ScenarioConfig, config_from_dict, default_config,
                          load_config, parse_fraction, x_label)


def test_default_config_describes_the_four_scenario_sweep():
    c = default_config()
    p = c.params
    assert (p.beta_A, p.beta_C) == (0.015, 0.001)
    assert (p.rho_H, p.rho_L, p.pi, p.y) == (0.0, 0.0, 0.0, 0.0)
    assert (p.alpha_H, p.alpha_L) == (28.0, 250.0)
    assert p.mu == 1.0 / 360.0
    assert c.x_values == (Fraction(0), Fraction(1, 60), Fraction(1, 24), Fraction(1, 12))
    assert (c.t_f, c.dt, c.n_cp, c.n_int) == (240.0, 12.0, 5, 20)
    assert c.B_lim > 0


def test_default_initial_state_has_population_100000():
    c = default_config()
    X0 = c.X0()
    assert X0.sum() == pytest.approx(100_000.0, rel=1e-12)
    assert np.all(X0 >= 0)
    infected = X0[model.I_AH:model.T_L + 1].sum() / X0.sum()
    assert infected == pytest.approx(0.01, rel=1e-9)


def test_empty_document_equals_defaults():
    assert config_from_dict({}) == default_config()


def test_full_document_round_trip(tmp_path):
    text = """
seed = 3
[model]
beta_A = 0.02
[costs]
K_T_treat = 1000
[initial]
kind = "outbreak"
prevalence = 0.02
population = 5000
[horizon]
t_f = 120
dt = 12
n_cp = 3
[budget]
B_lim = 1e6
[scenarios]
x = [0, "1/12", 0.5]
[calibration]
mode = "solve"
[solver]
max_iter = 50
hessian = "fd"
[output]
directory = "out"
"""
    path = tmp_path / "c.toml"
    path.write_text(text)
    c = load_config(path)
    assert c.seed == 3
    assert c.params.beta_A == 0.02 and c.costs.K_T_treat == 1000.0
    assert c.initial.prevalence == 0.02 and c.X0().sum() == pytest.approx(5000.0)
    assert (c.t_f, c.n_cp, c.n_int, c.B_lim) == (120.0, 3, 10, 1e6)
    assert c.x_values == (Fraction(0), Fraction(1, 12), Fraction(1, 2))
    assert c.calibration.mode == "solve"
    assert c.solver.max_iter == 50 and c.solver.options().hessian == "fd"
    assert c.output_dir == tmp_path / "out"


def test_explicit_initial_state():
    state = {name: 10.0 for name in model.STATE_NAMES}
    c = config_from_dict({"initial": {"state": state}})
    assert c.initial.kind == "explicit"
    np.testing.assert_allclose(c.X0(), np.full(model.N_STATE, 100_000.0 / model.N_STATE))


@pytest.mark.parametrize("doc", [
    {"model": {"beta_Z": 1.0}},
    {"horizon": {"t_f": 100}},                  # not a multiple of dt
    {"horizon": {"n_cp": 0}},
    {"horizon": {"n_cp": 2.5}},
    {"budget": {"B_lim": -1.0}},
    {"scenarios": {"x": ["-1/12"]}},
    {"scenarios": {"x": []}},
    {"scenarios": {"x": "1/12"}},
    {"scenarios": {"x": ["one"]}},
    {"initial": {"kind": "bogus"}},
    {"initial": {"state": {"S_H": 1.0, "Q": 2.0}}},
    {"calibration": {"mode": "fit"}},
    {"solver": {"hessian": "exact"}},
    {"solver": {"tol_kkt": 0.0}},
    {"model": {"beta_A": "high"}},
    {"model": {"mu": -1.0}},
    {"extra": {}},
])
def test_invalid_documents_raise_config_error(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[model\nbeta_A = ")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_shipped_example_config_loads():
    path = Path(__file__).resolve().parents[1] / "scripts" / "desk.toml"
    c = load_config(path)
    assert c.x_values == DEFAULT_X
    assert c.t_f == 240.0


@given(st.integers(0, 10**6), st.integers(1, 10**6))
def test_fraction_strings_parse_exactly(p, q):
    assert parse_fraction(f"{p}/{q}") == Fraction(p, q)


def test_fraction_labels():
    assert x_label(Fraction(0)) == "x_0"
    assert x_label(Fraction(1, 60)) == "x_1-60"
    assert parse_fraction(0.25) == Fraction(1, 4)
    with pytest.raises(ConfigError):
        parse_fraction(True)


def test_config_overrides_keep_validation():
    c = default_config()
    assert c.with_horizon(120).n_int == 10
    with pytest.raises(ConfigError):
        c.with_horizon(100)
    assert c.with_solver(tol_kkt=1e-7).solver.tol_kkt == 1e-7
    with pytest.raises(ConfigError):
        ScenarioConfig(x_values=(Fraction(-1),))
