"""Adaptive-step simulation of the model: trajectories under piecewise-constant
schedules, zero-control baselines, policy evaluation and endemic calibration.

Integration restarts at every control switch so that the discontinuity in the
right-hand side is never stepped across.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq, root

from . import model
from .model import CostParams, ModelParams, N_CONTROL, N_STATE

log = logging.getLogger(__name__)

DEFAULT_RTOL = 1e-10
DEFAULT_ATOL = 1e-8


class IntegrationError(RuntimeError):
    def __init__(self, message, t):
        super().__init__(f"{message} (at t = {t:.6g})")
        self.t = t


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ControlSchedule:
    """Piecewise-constant controls ``values[i] = (u_P, u_T)`` on
    ``[i dt, (i + 1) dt)``; right-continuous at the switching times."""

    dt: float
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1, N_CONTROL)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("controls must be finite and nonnegative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, n_int, dt):
        return cls(dt, np.zeros((n_int, N_CONTROL)))

    @classmethod
    def constant(cls, n_int, dt, u_P=0.0, u_T=0.0):
        return cls(dt, np.tile([u_P, u_T], (n_int, 1)))

    @property
    def n_int(self) -> int:
        return self.values.shape[0]

    @property
    def t_f(self) -> float:
        return self.n_int * self.dt

    @property
    def knots(self) -> np.ndarray:
        return self.dt * np.arange(self.n_int + 1)

    def interval(self, t) -> np.ndarray:
        idx = np.floor(np.asarray(t, dtype=float) / self.dt + 1e-12).astype(int)
        return np.clip(idx, 0, self.n_int - 1)

    def at(self, t) -> np.ndarray:
        return self.values[self.interval(t)]


@dataclass
class Trajectory:
    """Dense piecewise solution; ``segments`` holds one continuous dense
    output per control interval."""

    t: np.ndarray
    X: np.ndarray
    breaks: np.ndarray
    segments: list = field(repr=False)
    n_steps: int = 0
    nfev: int = 0

    @property
    def span(self):
        return float(self.breaks[0]), float(self.breaks[-1])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        lo, hi = self.span
        if np.any(t < lo - 1e-9) or np.any(t > hi + 1e-9):
            raise ValueError(f"t outside trajectory span [{lo}, {hi}]")
        seg = np.clip(np.searchsorted(self.breaks, t, side="right") - 1, 0, len(self.segments) - 1)
        out = np.empty((t.size, self.X.shape[1]))
        for s in np.unique(seg):
            mask = seg == s
            out[mask] = self.segments[s](np.clip(t[mask], self.breaks[s], self.breaks[s + 1])).T
        return out[0] if scalar else out

    @property
    def final(self) -> np.ndarray:
        return self.X[-1]


def _integrate_segments(fun, y0, breaks, rtol, atol, method):
    ts, ys, segments = [np.array([breaks[0]])], [np.asarray(y0, float)[None, :]], []
    n_steps = nfev = 0
    y = np.asarray(y0, dtype=float)
    for i, (a, b) in enumerate(zip(breaks[:-1], breaks[1:])):
        sol = solve_ivp(lambda t, z, i=i: fun(t, z, i), (a, b), y, method=method,
                        rtol=rtol, atol=atol, dense_output=True)
        if sol.status != 0:
            raise IntegrationError(f"integration failed: {sol.message}", float(sol.t[-1]))
        ts.append(sol.t[1:])
        ys.append(sol.y[:, 1:].T)
        segments.append(sol.sol)
        n_steps += sol.t.size - 1
        nfev += sol.nfev
        y = sol.y[:, -1]
    return Trajectory(np.concatenate(ts), np.vstack(ys), np.asarray(breaks, float), segments, n_steps, nfev)


def _breaks(schedule, span):
    t0, t1 = span
    if schedule is None:
        return np.array([t0, t1])
    inner = schedule.knots[(schedule.knots > t0 + 1e-12) & (schedule.knots < t1 - 1e-12)]
    return np.concatenate([[t0], inner, [t1]])


def _control_on(schedule, breaks, i):
    if schedule is None:
        return np.zeros(N_CONTROL)
    return schedule.at(breaks[i])


def integrate(params: ModelParams, X0, schedule: ControlSchedule | None = None, span=None,
              rtol: float = DEFAULT_RTOL, abs_tol: float = DEFAULT_ATOL,
              method: str = "RK45") -> Trajectory:
    """Simulate from ``X0`` over ``span`` (default ``[0, schedule.t_f]``).

    ``schedule=None`` means zero controls throughout.  The default method is
    the Dormand-Prince 5(4) pair.
    """
    if span is None:
        if schedule is None:
            raise ValueError("span is required without a schedule")
        span = (0.0, schedule.t_f)
    X0 = np.asarray(X0, dtype=float)
    if np.any(X0 < 0):
        raise ValueError("initial state must be nonnegative")
    breaks = _breaks(schedule, span)
    controls = [_control_on(schedule, breaks, i) for i in range(len(breaks) - 1)]

    def fun(t, X, i):
        return model.rhs(t, X, controls[i], params)

    return _integrate_segments(fun, X0, breaks, rtol, abs_tol, method)


def baseline_trajectories(params: ModelParams, controlled: Trajectory, schedule: ControlSchedule,
                          rtol: float = DEFAULT_RTOL, abs_tol: float = DEFAULT_ATOL,
                          method: str = "RK45") -> list:
    """Zero-control trajectories on each interval, restarted from the
    controlled state at the interval's left knot."""
    out = []
    for a, b in zip(schedule.knots[:-1], schedule.knots[1:]):
        out.append(integrate(params, np.maximum(controlled(a), 0.0), None, (a, b), rtol, abs_tol, method))
    return out


@dataclass
class PolicyEvaluation:
    trajectory: Trajectory       # columns: 9 states, cumulative cost, spend, deaths
    total_cost: float
    spend: np.ndarray
    baseline_spend: np.ndarray
    excess: np.ndarray
    feasible: np.ndarray
    deaths: float
    B_lim: float

    def states(self, t):
        return self.trajectory(t)[..., :N_STATE]

    def cumulative_incidence(self, t):
        return self.trajectory(t)[..., N_STATE]

    def cumulative_deaths(self, t):
        return self.trajectory(t)[..., N_STATE + 2]


def evaluate_policy(params: ModelParams, costs: CostParams, X0, schedule: ControlSchedule,
                    B_lim: float, rtol: float = DEFAULT_RTOL, abs_tol: float = DEFAULT_ATOL,
                    method: str = "RK45", feasibility_rtol: float = 1e-4) -> PolicyEvaluation:
    """Re-simulate ``schedule`` and integrate the incidence cost, spend and
    AIDS deaths alongside the state, then compute each interval's excess
    spend over its zero-control baseline."""
    X0 = np.asarray(X0, dtype=float)
    breaks = _breaks(schedule, (0.0, schedule.t_f))
    disc = costs.discount

    def fun(t, z, i):
        X = z[:N_STATE]
        u = schedule.values[i]
        cost = model.incidence_cost(X, params) * (np.exp(-disc * t) if disc else 1.0)
        return np.concatenate([model.rhs(t, X, u, params),
                               [cost, model.budget_rate(X, u, costs), model.death_rate(X, params)]])

    traj = _integrate_segments(fun, np.concatenate([X0, np.zeros(3)]), breaks, rtol, abs_tol, method)
    spend = np.diff(traj(schedule.knots)[:, N_STATE + 1])

    def base_fun(t, z, i):
        X = z[:N_STATE]
        return np.concatenate([model.rhs(t, X, np.zeros(N_CONTROL), params),
                               [model.budget_rate(X, np.zeros(N_CONTROL), costs)]])

    baseline = np.empty(schedule.n_int)
    for i, (a, b) in enumerate(zip(schedule.knots[:-1], schedule.knots[1:])):
        start = np.concatenate([np.maximum(traj(a)[:N_STATE], 0.0), [0.0]])
        seg = _integrate_segments(base_fun, start, np.array([a, b]), rtol, abs_tol, method)
        baseline[i] = seg.final[-1]
    excess = spend - baseline
    feasible = excess <= B_lim + feasibility_rtol * max(B_lim, 1.0)
    final = traj.final
    return PolicyEvaluation(traj, float(final[N_STATE]), spend, baseline, excess, feasible,
                            float(final[N_STATE + 2]), B_lim)


# --------------------------------------------------------------------------
# calibration

def disease_free_state(params: ModelParams) -> np.ndarray:
    """Uncontrolled equilibrium without infection (static-risk closed form
    when ``rho = 0``; otherwise obtained by solving the susceptible balance)."""
    p = params
    A = np.array([[p.rho_H + p.mu, -p.rho_L], [-p.rho_H, p.rho_L + p.mu]])
    s = np.linalg.solve(A, [p.alpha_H, p.alpha_L])
    return model.state_vector(S_H=s[0], S_L=s[1])


def outbreak_state(params: ModelParams, prevalence: float = 0.01) -> np.ndarray:
    """Disease-free population with a fraction ``prevalence`` moved into the
    infected and treated compartments along the fastest-growing mode of the
    infection subsystem linearised at the disease-free state.

    Seeding along that mode avoids the fast start-up transient an arbitrary
    seed would trigger.
    """
    if not 0.0 <= prevalence < 1.0:
        raise ValueError("prevalence must lie in [0, 1)")
    X = disease_free_state(params)
    Jx, _ = model.rhs_jacobian(X, np.zeros(N_CONTROL), params)
    inf = np.arange(model.I_AH, model.T_L + 1)
    vals, vecs = np.linalg.eig(Jx[np.ix_(inf, inf)])
    k = int(np.argmax(vals.real))
    mode = np.abs(vecs[:, k].real)
    if mode.sum() == 0:
        raise ValueError("no infection growth mode")
    seed = prevalence * X.sum() * mode / mode.sum()
    X[inf] = seed
    X[model.S_H] -= seed[0::2].sum()   # I_AH, I_CH, T_H
    X[model.S_L] -= seed[1::2].sum()
    if np.any(X < 0):
        raise ValueError(f"prevalence {prevalence} exceeds the susceptible pool of a risk group")
    return X


def prevalence(X) -> float:
    X = np.asarray(X, dtype=float)
    infected = X[model.I_AH:model.T_L + 1].sum()
    return float(infected / X.sum())


def treated_fraction(X) -> float:
    X = np.asarray(X, dtype=float)
    infected = X[model.I_AH:model.T_L + 1].sum()
    return float(X[model.T_H] + X[model.T_L]) / infected if infected > 0 else float("nan")


def endemic_equilibrium(params: ModelParams, seed=None, horizon: float = 5000.0,
                        tol: float = 1e-8, min_prevalence: float = 1e-6):
    """Zero-control endemic steady state, or ``None`` if the infection dies out.

    Integrates ``horizon`` months from a seeded disease-free state, then
    polishes with Newton's method; accepted when ``max|rhs| <= tol * N``.
    """
    if seed is None:
        dfe = disease_free_state(params)
        seed = dfe.copy()
        seed[[model.I_AH, model.I_AL]] = 1e-3 * dfe[[model.S_H, model.S_L]]
    traj = integrate(params, seed, None, (0.0, horizon), rtol=1e-9, abs_tol=1e-6)
    X = traj.final
    sol = root(lambda z: model.rhs(0.0, z, np.zeros(N_CONTROL), params), X,
               jac=lambda z: model.rhs_jacobian(z, np.zeros(N_CONTROL), params)[0], method="hybr",
               options={"xtol": 1e-14})
    if sol.success and np.all(sol.x > -1e-9 * sol.x.sum()) and np.allclose(sol.x, X, rtol=0.05, atol=1.0):
        X = np.maximum(sol.x, 0.0)
    N = X.sum()
    residual = np.max(np.abs(model.rhs(0.0, X, np.zeros(N_CONTROL), params)))
    if residual > tol * N:
        log.debug("equilibrium residual %.3e exceeds %.3e", residual, tol * N)
        return None
    if prevalence(X) < min_prevalence:
        return None
    return X


@dataclass
class CalibrationResult:
    params: ModelParams
    equilibrium: np.ndarray
    prevalence: float
    treated_fraction: float
    evaluations: int

    @property
    def lambda_L(self):
        return self.params.lambda_L

    @property
    def baseline_tap(self):
        return self.params.baseline_tap


def calibrate(params: ModelParams, prevalence_target: float = 0.20, treated_target: float = 0.25,
              contact_ratio: float = 10.0, lambda_box=(0.1, 20.0), tap_box=(1e-5, 0.1),
              seed=None, tol: float = 1e-3) -> CalibrationResult:
    """Choose ``lambda_L`` (with ``lambda_H = contact_ratio * lambda_L``) and the
    baseline TaP rate so that the endemic equilibrium hits both targets.

    Nested scalar root-finds: the outer one on ``lambda_L`` for prevalence, the
    inner one on the baseline TaP rate for the treated fraction.
    """
    count = 0

    def with_(lam, tap):
        return params.replace(lambda_L=lam, lambda_H=contact_ratio * lam, baseline_tap=tap)

    def equilibrium(lam, tap):
        nonlocal count
        count += 1
        return endemic_equilibrium(with_(lam, tap), seed=seed)

    def treated_gap(lam, tap):
        X = equilibrium(lam, tap)
        # extinction happens at high treatment rates: report as overshoot
        return 1.0 - treated_target if X is None else treated_fraction(X) - treated_target

    def inner(lam):
        lo, hi = tap_box
        g_lo, g_hi = treated_gap(lam, lo), treated_gap(lam, hi)
        if g_lo * g_hi > 0:
            return None
        return brentq(lambda v: treated_gap(lam, v), lo, hi, xtol=1e-12, rtol=1e-12)

    def prevalence_gap(lam):
        tap = inner(lam)
        if tap is None:
            return -prevalence_target
        X = equilibrium(lam, tap)
        return -prevalence_target if X is None else prevalence(X) - prevalence_target

    lo, hi = lambda_box
    g_lo, g_hi = prevalence_gap(lo), prevalence_gap(hi)
    if g_lo * g_hi > 0:
        raise CalibrationError(f"no endemic equilibrium matching prevalence {prevalence_target} "
                               f"for lambda_L in {lambda_box}")
    lam = brentq(prevalence_gap, lo, hi, xtol=1e-10, rtol=1e-10)
    tap = inner(lam)
    X = None if tap is None else equilibrium(lam, tap)
    if X is None:
        raise CalibrationError("calibration search did not reach an endemic equilibrium")
    prev, treat = prevalence(X), treated_fraction(X)
    if abs(prev - prevalence_target) > tol or abs(treat - treated_target) > tol:
        raise CalibrationError(f"calibration residuals too large: prevalence {prev:.4f}, treated {treat:.4f}")
    return CalibrationResult(with_(lam, tap), X, prev, treat, count)
