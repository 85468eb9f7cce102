"""Scenario sweep over PrEP drop-out rates, output tables and the
end-of-horizon artifact checks."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from . import model
from .config import ScenarioConfig, x_label
from .model import N_STATE, STATE_NAMES, ModelParams
from .oracle import (CalibrationResult, ControlSchedule, PolicyEvaluation, calibrate,
                     evaluate_policy)
from .sqp import SolverOptions, SolverResult, solve
from .transcribe import TranscribedNlp, build_grid, build_nlp

log = logging.getLogger(__name__)

STATE_HEADER = ("t",) + STATE_NAMES + ("N", "cumulative_deaths", "cumulative_incidence")
CONTROL_HEADER = ("interval", "t_start", "u_P", "u_T")
BUDGET_HEADER = ("interval", "spend", "baseline_spend", "excess", "B_lim")
SUMMARY_HEADER = ("x", "status", "iterations", "nlp_objective", "new_infections", "relative_gap",
                  "deaths", "terminal_incidence", "max_excess_ratio", "binding_intervals", "feasible")

OBJECTIVE_RTOL = 5e-3
BUDGET_RTOL = 1e-4


@dataclass
class ScenarioResult:
    x: Fraction
    params: ModelParams
    X0: np.ndarray
    nlp: TranscribedNlp
    solver: SolverResult
    schedule: ControlSchedule
    evaluation: PolicyEvaluation
    objective: float
    runtime: float = 0.0

    @property
    def converged(self) -> bool:
        return self.solver.converged

    @property
    def new_infections(self) -> float:
        return self.evaluation.total_cost

    @property
    def relative_gap(self) -> float:
        """Re-simulated cost against the NLP objective."""
        return abs(self.new_infections - self.objective) / max(abs(self.objective), 1e-300)

    @property
    def terminal_incidence(self) -> float:
        X = self.evaluation.trajectory.final[:N_STATE]
        return float(model.incidence_cost(X, self.params))

    @property
    def max_excess_ratio(self) -> float:
        """Largest re-simulated excess spend in units of ``B_lim`` (absolute
        excess when the limit is zero)."""
        ev = self.evaluation
        return float(np.max(ev.excess / ev.B_lim)) if ev.B_lim > 0 else float(np.max(ev.excess))

    @property
    def binding_intervals(self) -> int:
        ev = self.evaluation
        if ev.B_lim <= 0:
            return int(self.schedule.n_int)
        return int(np.sum(ev.excess >= ev.B_lim * (1.0 - 1e-3)))

    @property
    def feasible(self) -> bool:
        ev = self.evaluation
        return bool(np.all(ev.excess <= ev.B_lim * (1.0 + BUDGET_RTOL) + BUDGET_RTOL * (ev.B_lim == 0)))

    @property
    def verified(self) -> bool:
        return self.relative_gap <= OBJECTIVE_RTOL and self.feasible

    def summary_row(self) -> dict:
        return {"x": str(self.x), "status": self.solver.status, "iterations": self.solver.iterations,
                "nlp_objective": self.objective, "new_infections": self.new_infections,
                "relative_gap": self.relative_gap, "deaths": self.evaluation.deaths,
                "terminal_incidence": self.terminal_incidence,
                "max_excess_ratio": self.max_excess_ratio,
                "binding_intervals": self.binding_intervals, "feasible": self.feasible}


@dataclass
class ScenarioRun:
    results: list
    calibration: CalibrationResult | None = None
    output_dir: Path | None = None

    @property
    def converged(self) -> bool:
        return all(r.converged for r in self.results)

    @property
    def exit_status(self) -> int:
        return 0 if self.converged else 2

    def summary(self) -> list:
        return [r.summary_row() for r in self.results]


def resolve_params(config: ScenarioConfig):
    """Model parameters for the sweep: pinned from the config, or with
    ``lambda_L``, ``lambda_H`` and the baseline TaP rate calibrated."""
    if config.calibration.mode == "pinned":
        return config.params, None
    c = config.calibration
    result = calibrate(config.params, prevalence_target=c.prevalence, treated_target=c.treated,
                       contact_ratio=c.contact_ratio)
    return result.params, result


def solve_scenario(config: ScenarioConfig, x, params: ModelParams | None = None,
                   t_f: float | None = None, options: SolverOptions | None = None) -> ScenarioResult:
    """Transcribe, solve and re-simulate one scenario."""
    start = time.perf_counter()
    x = Fraction(x)
    params = (config.params if params is None else params).replace(x=float(x))
    t_f = config.t_f if t_f is None else float(t_f)
    n_int = int(round(t_f / config.dt))
    X0 = config.X0(params)
    nlp = build_nlp(build_grid(n_int, config.dt, config.n_cp), params, config.costs, X0, config.B_lim)
    z0 = nlp.initial_guess(config.solver.initial_guess, config.solver.guess_level)
    result = solve(nlp.problem(), z0, options or config.solver.options())
    schedule, _ = nlp.extract_solution(result.x)
    evaluation = evaluate_policy(params, config.costs, X0, schedule, config.B_lim)
    out = ScenarioResult(x, params, X0, nlp, result, schedule, evaluation,
                         nlp.unscaled_objective(result.x), time.perf_counter() - start)
    log.info("x=%s %s after %d iterations: J=%.6g re-simulated %.6g (gap %.1e) in %.1fs",
             x, result.status, result.iterations, out.objective, out.new_infections,
             out.relative_gap, out.runtime)
    if not out.verified:
        log.warning("x=%s failed re-simulation check: gap %.2e, max excess ratio %.6f",
                    x, out.relative_gap, out.max_excess_ratio)
    return out


def run_scenarios(config: ScenarioConfig, x_values=None, output_dir=None, write: bool = True,
                  options: SolverOptions | None = None) -> ScenarioRun:
    """Solve every scenario of the sweep and write its tables.

    Per scenario a sub-directory ``x_<p>-<q>`` receives the state, control,
    budget and plot tables plus the solver history; ``summary.csv`` lists the
    total new infections of each scenario.
    """
    params, calib = resolve_params(config)
    xs = config.x_values if x_values is None else tuple(Fraction(x) for x in x_values)
    output_dir = Path(config.output_dir if output_dir is None else output_dir)
    results = [solve_scenario(config, x, params, options=options) for x in xs]
    run = ScenarioRun(results, calib, output_dir if write else None)
    if write:
        output_dir.mkdir(parents=True, exist_ok=True)
        if calib is not None:
            write_calibration(calib, output_dir / "calibration.csv")
        for r in results:
            directory = output_dir / x_label(r.x)
            emit_outputs(r.evaluation, r.schedule, directory, params=r.params)
            write_history(r.solver, directory / "solver_history.csv")
            if not r.converged:
                (directory / "diagnostics.txt").write_text(diagnostics(r))
        write_table(output_dir / "summary.csv", SUMMARY_HEADER, [r.summary_row() for r in results])
    return run


def diagnostics(result: ScenarioResult) -> str:
    s = result.solver
    lines = [f"x = {result.x}", f"status = {s.status}", f"message = {s.message}",
             f"iterations = {s.iterations}", f"objective = {s.fun!r}",
             f"constraint violation = {s.violation!r}", f"kkt residual = {s.kkt!r}"]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# tables

def write_table(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[h] for h in header] if isinstance(row, dict) else row)
    return path


def read_table(path):
    """Header and float rows of a numeric table written by :func:`write_table`."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        rows = np.array([[float(v) for v in row] for row in reader])
    return header, rows


def state_samples(evaluation: PolicyEvaluation, t_f: float | None = None) -> np.ndarray:
    """Monthly rows ``t, states, N, cumulative deaths, cumulative incidence``."""
    t_f = evaluation.trajectory.span[1] if t_f is None else t_f
    t = np.arange(int(round(t_f)) + 1, dtype=float)
    Z = evaluation.trajectory(t)
    X = Z[:, :N_STATE]
    return np.column_stack([t, X, X.sum(axis=1), Z[:, N_STATE + 2], Z[:, N_STATE]])


def write_history(result: SolverResult, path):
    keys = ("iteration", "f", "violation", "kkt", "penalty", "alpha", "merit_before", "merit_after",
            "step")
    rows = [[h.get(k, "") for k in keys] for h in result.history]
    return write_table(path, keys, rows)


def write_calibration(calib: CalibrationResult, path):
    p = calib.params
    row = {"lambda_H": p.lambda_H, "lambda_L": p.lambda_L, "baseline_tap": p.baseline_tap,
           "prevalence": calib.prevalence, "treated_fraction": calib.treated_fraction}
    return write_table(path, tuple(row), [row])


def emit_outputs(evaluation: PolicyEvaluation, schedule: ControlSchedule, directory,
                 params: ModelParams | None = None) -> dict:
    """Write ``states.csv``, ``controls.csv``, ``budget.csv`` and the
    ``plot/`` series for one solved scenario; returns the written paths.

    ``states.csv`` has the columns of :data:`STATE_HEADER`, one row per month
    from 0 to ``t_f``.  Floats are written in shortest round-trip form, so
    parsing the table back reproduces the samples exactly.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    samples = state_samples(evaluation, schedule.t_f)
    paths = {"states": write_table(directory / "states.csv", STATE_HEADER, samples.tolist())}
    knots = schedule.knots[:-1]
    paths["controls"] = write_table(
        directory / "controls.csv", CONTROL_HEADER,
        [[i, float(knots[i]), float(u[0]), float(u[1])] for i, u in enumerate(schedule.values)])
    paths["budget"] = write_table(
        directory / "budget.csv", BUDGET_HEADER,
        [[i, float(evaluation.spend[i]), float(evaluation.baseline_spend[i]),
          float(evaluation.excess[i]), float(evaluation.B_lim)] for i in range(schedule.n_int)])

    t = samples[:, 0]
    series = {name: samples[:, 1 + k] for k, name in enumerate(STATE_HEADER[1:])}
    X = samples[:, 1:1 + N_STATE]
    infected = X[:, model.I_AH:model.T_L + 1].sum(axis=1)
    series["prevalence"] = infected / samples[:, 1 + N_STATE]
    if params is not None:
        series["incidence_rate"] = model.incidence_cost(X, params)
    u = schedule.at(t)
    series["u_P"], series["u_T"] = u[:, 0], u[:, 1]
    plot_dir = directory / "plot"
    for name, values in series.items():
        paths[f"plot/{name}"] = write_table(plot_dir / f"{name}.csv", ("t", name),
                                            np.column_stack([t, values]).tolist())
    return paths


# --------------------------------------------------------------------------
# end-of-horizon artifacts

def _interval_excess(params, costs, X_start, dt, u, B_lim):
    sched = ControlSchedule(dt, np.atleast_2d(u))
    return evaluate_policy(params, costs, X_start, sched, B_lim, rtol=1e-9, abs_tol=1e-6).excess[0]


def saturating_schedule(params: ModelParams, costs, X0, n_int: int, dt: float, B_lim: float,
                        which: str) -> ControlSchedule:
    """Single-intervention schedule spending exactly ``B_lim`` above baseline
    in every interval (``which`` is ``"PrEP"`` or ``"TaP"``).

    Intervals are filled in order, each from the state the previous ones lead
    to.  Enrollment spend alone already reaches ``B_lim`` at
    ``u = B_lim / (K_enroll N dt)``, which brackets the root.
    """
    col = {"PrEP": model.U_P, "TaP": model.U_T}[which]
    k_enroll = costs.K_P_enroll if col == model.U_P else costs.K_T_enroll
    X = np.asarray(X0, dtype=float)
    values = np.zeros((n_int, model.N_CONTROL))
    for i in range(n_int):
        if B_lim > 0 and k_enroll > 0:
            def gap(v):
                u = np.zeros(model.N_CONTROL)
                u[col] = v
                return _interval_excess(params, costs, X, dt, u, B_lim) - B_lim

            hi = B_lim / (k_enroll * X.sum() * dt)
            while gap(hi) < 0:
                hi *= 2.0
            values[i, col] = brentq(gap, 0.0, hi, xtol=1e-14, rtol=1e-10)
        seg = evaluate_policy(params, costs, X, ControlSchedule(dt, values[i:i + 1]), B_lim,
                              rtol=1e-9, abs_tol=1e-6)
        X = np.maximum(seg.trajectory.final[:N_STATE], 0.0)
    return ControlSchedule(dt, values)


def last_dominance_switch(t, cost_a, cost_b, rtol: float = 1e-9):
    """Time of the last sign change of ``cost_a - cost_b`` (sample at which
    the new sign is first seen), or ``None``.  Ties within ``rtol`` carry no
    sign."""
    diff = np.asarray(cost_a, float) - np.asarray(cost_b, float)
    scale = np.maximum(np.abs(cost_a), np.abs(cost_b))
    sign = np.where(np.abs(diff) <= rtol * np.maximum(scale, 1e-300), 0, np.sign(diff))
    nz = np.flatnonzero(sign)
    if nz.size < 2:
        return None
    flips = nz[1:][sign[nz[1:]] != sign[nz[:-1]]]
    return float(t[flips[-1]]) if flips.size else None


@dataclass
class DominanceReport:
    """Heuristic (a): cumulative new infections of the only-PrEP and only-TaP
    budget-saturating policies and where their order last flips.  The final
    ``switch_time`` months of the horizon are flagged for discarding."""

    x: Fraction
    t: np.ndarray
    cost_prep: np.ndarray
    cost_tap: np.ndarray
    switch_time: float | None
    t_f: float

    @property
    def discard_window(self):
        if self.switch_time is None or self.switch_time <= 0:
            return None
        return (max(self.t_f - self.switch_time, 0.0), self.t_f)

    def to_dict(self) -> dict:
        return {"x": str(self.x), "switch_time": self.switch_time,
                "discard_window": self.discard_window,
                "final_cost_prep": float(self.cost_prep[-1]),
                "final_cost_tap": float(self.cost_tap[-1])}


def dominance_analysis(config: ScenarioConfig, params: ModelParams, x=None) -> DominanceReport:
    x = Fraction(params.x).limit_denominator(10**6) if x is None else Fraction(x)
    p = params.replace(x=float(x))
    X0 = config.X0(p)
    t = np.arange(int(round(config.t_f)) + 1, dtype=float)
    cum = {}
    for which in ("PrEP", "TaP"):
        sched = saturating_schedule(p, config.costs, X0, config.n_int, config.dt, config.B_lim, which)
        ev = evaluate_policy(p, config.costs, X0, sched, config.B_lim)
        cum[which] = ev.cumulative_incidence(t)
    return DominanceReport(x, t, cum["PrEP"], cum["TaP"],
                           last_dominance_switch(t, cum["PrEP"], cum["TaP"]), config.t_f)


def interval_labels(schedule: ControlSchedule, costs, rtol: float = 1e-6) -> list:
    """Dominant intervention per interval by enrollment spend rate
    (``"PrEP"``, ``"TaP"`` or ``"none"`` when both are negligible)."""
    prep = costs.K_P_enroll * schedule.values[:, model.U_P]
    tap = costs.K_T_enroll * schedule.values[:, model.U_T]
    scale = max(float(np.max(prep + tap)), 1e-300)
    out = []
    for a, b in zip(prep, tap):
        if max(a, b) <= rtol * scale:
            out.append("none")
        else:
            out.append("PrEP" if a > b else "TaP")
    return out


def terminal_switch(labels, dt: float):
    """Last change of dominant intervention: ``(from, to, distance from the
    horizon end)`` or ``None``."""
    n = len(labels)
    for i in range(n - 1, 0, -1):
        if labels[i] != labels[i - 1]:
            return labels[i - 1], labels[i], (n - i) * dt
    return None


@dataclass
class HorizonReport:
    """Heuristic (b): terminal switches of the same scenario solved on
    shortened horizons."""

    x: Fraction
    horizons: list
    labels: list
    switches: list
    converged: list
    dt: float

    @property
    def recurring(self) -> bool:
        """Every horizon ends with the same switch at the same distance."""
        if not self.switches or any(s is None for s in self.switches):
            return False
        return len({(a, b, round(d / self.dt)) for a, b, d in self.switches}) == 1

    @property
    def artifact(self):
        """The recurring switch, flagged as an artifact of the finite horizon."""
        return self.switches[0] if self.recurring else None

    def consistent(self) -> bool:
        """Internal consistency of the report (used as a self-check)."""
        if not (len(self.horizons) == len(self.labels) == len(self.switches) == len(self.converged)):
            return False
        for h, lab, sw in zip(self.horizons, self.labels, self.switches):
            if len(lab) != int(round(h / self.dt)):
                return False
            if sw != terminal_switch(lab, self.dt):
                return False
        return self.recurring == (self.artifact is not None)

    def to_dict(self) -> dict:
        return {"x": str(self.x), "horizons": self.horizons, "labels": self.labels,
                "switches": [None if s is None else list(s) for s in self.switches],
                "converged": self.converged, "recurring": self.recurring,
                "artifact": None if self.artifact is None else list(self.artifact)}


def horizon_analysis(config: ScenarioConfig, params: ModelParams, x, shifts=(0, 2, 4),
                     options: SolverOptions | None = None) -> HorizonReport:
    horizons, labels, switches, converged = [], [], [], []
    for k in shifts:
        t_f = config.t_f - k * config.dt
        if t_f < 2 * config.dt:
            continue
        r = solve_scenario(config, x, params, t_f=t_f, options=options)
        lab = interval_labels(r.schedule, config.costs)
        horizons.append(t_f)
        labels.append(lab)
        switches.append(terminal_switch(lab, config.dt))
        converged.append(r.converged)
    return HorizonReport(Fraction(x), horizons, labels, switches, converged, config.dt)


@dataclass
class TailReport:
    dominance: list = field(default_factory=list)
    horizon: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"dominance": [d.to_dict() for d in self.dominance],
                "horizon": [h.to_dict() for h in self.horizon]}

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path


def tail_artifact_analysis(config: ScenarioConfig, results, horizon_sweep: bool = True,
                           options: SolverOptions | None = None) -> TailReport:
    """Both end-of-horizon checks for every solved scenario in ``results``."""
    results = list(results)
    if not results:
        raise ValueError("tail analysis needs at least one solved scenario")
    report = TailReport()
    for r in results:
        report.dominance.append(dominance_analysis(config, r.params, r.x))
        if horizon_sweep:
            report.horizon.append(horizon_analysis(config, r.params, r.x, options=options))
    return report
