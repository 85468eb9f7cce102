"""Scenario configuration: a TOML file with nested sections.

Schema (every section and key is optional; omitted values take the defaults
shown, which describe the four-scenario PrEP-retention sweep)::

    seed = 0                      # reserved; the pipeline uses no randomness

    [model]                       # any ModelParams field
    beta_A = 0.015
    beta_C = 0.001

    [costs]                       # any CostParams field
    K_T_treat = 1299.0

    [initial]
    kind = "outbreak"             # or "explicit"
    prevalence = 0.01             # outbreak seed fraction
    population = 100000.0         # total head count the initial state is scaled to
    # state = { S_H = ..., S_L = ..., ... }   # for kind = "explicit"

    [horizon]
    t_f = 240.0                   # months
    dt = 12.0                     # control interval, months
    n_cp = 5                      # LGR collocation points per interval

    [budget]
    B_lim = 2.0e7                 # excess spend allowed per interval

    [scenarios]
    x = [0, "1/60", "1/24", "1/12"]   # PrEP drop-out rates; fractions as strings

    [calibration]
    mode = "pinned"               # or "solve"
    prevalence = 0.20
    treated = 0.25
    contact_ratio = 10.0

    [solver]
    max_iter = 500
    tol_constraint = 1e-6
    tol_kkt = 1e-5
    hessian = "bfgs"              # or "fd"
    initial_guess = "simulate"    # or "constant", "aggressive"
    guess_level = 1e-3

    [output]
    directory = "results"
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import tomli

from . import model
from .model import CostParams, ModelParams
from .oracle import outbreak_state
from .sqp import SolverOptions


class ConfigError(ValueError):
    pass


DEFAULT_X = (Fraction(0), Fraction(1, 60), Fraction(1, 24), Fraction(1, 12))


def parse_fraction(value) -> Fraction:
    """``0.5``, ``"1/60"`` or ``"0.25"`` as an exact fraction."""
    if isinstance(value, bool):
        raise ConfigError(f"not a number: {value!r}")
    try:
        if isinstance(value, float):
            return Fraction(value).limit_denominator(10**12)
        return Fraction(value)
    except (TypeError, ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a number or fraction: {value!r}") from exc


def x_label(x: Fraction) -> str:
    """Directory-safe tag, e.g. ``x_1-60``."""
    x = Fraction(x)
    return f"x_{x.numerator}" if x.denominator == 1 else f"x_{x.numerator}-{x.denominator}"


@dataclass(frozen=True)
class InitialState:
    kind: str = "outbreak"
    prevalence: float = 0.01
    population: float | None = 100_000.0
    state: tuple | None = None

    def vector(self, params: ModelParams) -> np.ndarray:
        if self.kind == "outbreak":
            X = outbreak_state(params, self.prevalence)
        else:
            X = np.array(self.state, dtype=float)
        if self.population is not None:
            X = X * (self.population / X.sum())
        return X


@dataclass(frozen=True)
class CalibrationSettings:
    mode: str = "pinned"
    prevalence: float = 0.20
    treated: float = 0.25
    contact_ratio: float = 10.0


@dataclass(frozen=True)
class SolverSettings:
    max_iter: int = 500
    tol_constraint: float = 1e-6
    tol_kkt: float = 1e-5
    hessian: str = "bfgs"
    initial_guess: str = "simulate"
    guess_level: float = 1e-3

    def options(self, **extra) -> SolverOptions:
        return SolverOptions(max_iter=self.max_iter, tol_constraint=self.tol_constraint,
                             tol_kkt=self.tol_kkt, hessian=self.hessian, **extra)


@dataclass(frozen=True)
class ScenarioConfig:
    params: ModelParams = field(default_factory=ModelParams)
    costs: CostParams = field(default_factory=CostParams)
    initial: InitialState = field(default_factory=InitialState)
    t_f: float = 240.0
    dt: float = 12.0
    n_cp: int = 5
    B_lim: float = 2.0e7
    x_values: tuple = DEFAULT_X
    calibration: CalibrationSettings = field(default_factory=CalibrationSettings)
    solver: SolverSettings = field(default_factory=SolverSettings)
    output_dir: Path = Path("results")
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> "ScenarioConfig":
        try:
            self.params.validate()
            self.costs.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not (self.t_f > 0 and self.dt > 0):
            raise ConfigError("t_f and dt must be positive")
        ratio = self.t_f / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError(f"t_f = {self.t_f} is not a multiple of dt = {self.dt}")
        if abs(self.t_f - round(self.t_f)) > 1e-9:
            raise ConfigError("t_f must be a whole number of months")
        if int(self.n_cp) != self.n_cp or self.n_cp < 1:
            raise ConfigError("n_cp must be a positive integer")
        if not (np.isfinite(self.B_lim) and self.B_lim >= 0):
            raise ConfigError("B_lim must be finite and >= 0")
        if not self.x_values:
            raise ConfigError("at least one x value is required")
        if any(x < 0 for x in self.x_values):
            raise ConfigError("x values must be >= 0")
        init = self.initial
        if init.kind not in ("outbreak", "explicit"):
            raise ConfigError(f"unknown initial state kind {init.kind!r}")
        if init.kind == "outbreak" and not 0.0 <= init.prevalence < 1.0:
            raise ConfigError("initial prevalence must lie in [0, 1)")
        if init.kind == "explicit":
            if init.state is None or len(init.state) != model.N_STATE:
                raise ConfigError("explicit initial state needs all nine compartments")
            if any(v < 0 for v in init.state) or sum(init.state) <= 0:
                raise ConfigError("initial state must be nonnegative and nonempty")
        if init.population is not None and not init.population > 0:
            raise ConfigError("population must be positive")
        if self.calibration.mode not in ("pinned", "solve"):
            raise ConfigError(f"unknown calibration mode {self.calibration.mode!r}")
        if self.solver.hessian not in ("bfgs", "fd"):
            raise ConfigError(f"unknown hessian mode {self.solver.hessian!r}")
        if self.solver.initial_guess not in ("simulate", "constant", "aggressive"):
            raise ConfigError(f"unknown initial guess {self.solver.initial_guess!r}")
        if not (self.solver.max_iter >= 1 and self.solver.tol_constraint > 0 and self.solver.tol_kkt > 0):
            raise ConfigError("solver max_iter and tolerances must be positive")
        return self

    @property
    def n_int(self) -> int:
        return int(round(self.t_f / self.dt))

    def X0(self, params: ModelParams | None = None) -> np.ndarray:
        return self.initial.vector(self.params if params is None else params)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def with_horizon(self, t_f: float) -> "ScenarioConfig":
        return self.replace(t_f=float(t_f))

    def with_solver(self, **changes) -> "ScenarioConfig":
        return self.replace(solver=dataclasses.replace(self.solver, **changes))


# --------------------------------------------------------------------------
# loading

_SECTIONS = ("model", "costs", "initial", "horizon", "budget", "scenarios", "calibration",
             "solver", "output")


def _check_keys(section, table, allowed):
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def _field_names(cls):
    return [f.name for f in dataclasses.fields(cls)]


def _number(section, key, value, kind=float):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"[{section}] {key} must be a number, got {value!r}")
    if kind is int:
        if int(value) != value:
            raise ConfigError(f"[{section}] {key} must be an integer, got {value!r}")
        return int(value)
    return float(value)


def _numeric_table(section, table, cls):
    _check_keys(section, table, _field_names(cls))
    return {k: _number(section, k, v) for k, v in table.items()}


def config_from_dict(data: dict, base_dir: Path | None = None) -> ScenarioConfig:
    """Build a config from a parsed TOML document."""
    _check_keys("top level", data, _SECTIONS + ("seed",))
    kw = {}
    params = ModelParams(**_numeric_table("model", data.get("model", {}), ModelParams))
    costs = CostParams(**_numeric_table("costs", data.get("costs", {}), CostParams))
    kw.update(params=params, costs=costs)

    init = data.get("initial", {})
    _check_keys("initial", init, ("kind", "prevalence", "population", "state"))
    state = init.get("state")
    if state is not None:
        _check_keys("initial.state", state, model.STATE_NAMES)
        state = tuple(_number("initial.state", n, state.get(n, 0.0)) for n in model.STATE_NAMES)
    kind = init.get("kind", "explicit" if state is not None else "outbreak")
    population = init.get("population", InitialState.population)
    if population is not None:
        population = _number("initial", "population", population)
    kw["initial"] = InitialState(kind=kind,
                                 prevalence=_number("initial", "prevalence",
                                                    init.get("prevalence", InitialState.prevalence)),
                                 population=population, state=state)

    horizon = data.get("horizon", {})
    _check_keys("horizon", horizon, ("t_f", "dt", "n_cp"))
    if "t_f" in horizon:
        kw["t_f"] = _number("horizon", "t_f", horizon["t_f"])
    if "dt" in horizon:
        kw["dt"] = _number("horizon", "dt", horizon["dt"])
    if "n_cp" in horizon:
        kw["n_cp"] = _number("horizon", "n_cp", horizon["n_cp"], int)

    budget = data.get("budget", {})
    _check_keys("budget", budget, ("B_lim",))
    if "B_lim" in budget:
        kw["B_lim"] = _number("budget", "B_lim", budget["B_lim"])

    scen = data.get("scenarios", {})
    _check_keys("scenarios", scen, ("x",))
    if "x" in scen:
        if not isinstance(scen["x"], list):
            raise ConfigError("[scenarios] x must be a list")
        kw["x_values"] = tuple(parse_fraction(v) for v in scen["x"])

    calib = data.get("calibration", {})
    _check_keys("calibration", calib, _field_names(CalibrationSettings))
    kw["calibration"] = CalibrationSettings(**{k: (v if k == "mode" else _number("calibration", k, v))
                                               for k, v in calib.items()})

    solver = data.get("solver", {})
    _check_keys("solver", solver, _field_names(SolverSettings))
    typed = {}
    for k, v in solver.items():
        if k in ("hessian", "initial_guess"):
            typed[k] = v
        else:
            typed[k] = _number("solver", k, v, int if k == "max_iter" else float)
    kw["solver"] = SolverSettings(**typed)

    out = data.get("output", {})
    _check_keys("output", out, ("directory",))
    if "directory" in out:
        directory = Path(out["directory"])
        if base_dir is not None and not directory.is_absolute():
            directory = base_dir / directory
        kw["output_dir"] = directory
    if "seed" in data:
        kw["seed"] = _number("top level", "seed", data["seed"], int)
    try:
        return ScenarioConfig(**kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ScenarioConfig:
    """Read a TOML scenario file.  A relative output directory is resolved
    against the file's location."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomli.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return config_from_dict(data, base_dir=path.parent)


def default_config() -> ScenarioConfig:
    return ScenarioConfig()
