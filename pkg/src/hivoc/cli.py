"""Command-line entry point.

Subcommands ``calibrate``, ``optimize``, ``simulate`` and ``tail-check``.
Exit codes: 0 success, 2 solver non-convergence, 3 configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, ScenarioConfig, default_config, load_config, parse_fraction, x_label
from .oracle import CalibrationError, ControlSchedule, calibrate, evaluate_policy
from .scenarios import (SUMMARY_HEADER, emit_outputs, read_table, resolve_params, run_scenarios,
                        solve_scenario, tail_artifact_analysis, write_calibration)

EXIT_OK, EXIT_NONCONVERGED, EXIT_CONFIG = 0, 2, 3

log = logging.getLogger("hivoc")


def _common(parser):
    parser.add_argument("--config", type=Path, help="scenario TOML file (defaults built in)")
    parser.add_argument("--out", type=Path, help="output directory (overrides the config)")
    parser.add_argument("--x", action="append", metavar="X",
                        help="only this PrEP drop-out rate, e.g. 1/12 (repeatable)")
    parser.add_argument("--horizon", type=float, metavar="MONTHS", help="override t_f")
    parser.add_argument("--b-lim", type=float, help="override the per-interval budget limit")
    parser.add_argument("--max-iter", type=int, help="SQP iteration limit")
    parser.add_argument("--tol-constraint", type=float, help="constraint violation tolerance")
    parser.add_argument("--tol-kkt", type=float, help="KKT residual tolerance")
    parser.add_argument("--hessian", choices=("bfgs", "fd"), help="Hessian approximation")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hivoc",
                                     description="Budget-constrained HIV prevention optimal control")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit lambda_L and the baseline TaP rate to the endemic targets")
    _common(p)

    p = sub.add_parser("optimize", help="solve the scenario sweep and write tables")
    _common(p)

    p = sub.add_parser("simulate", help="re-simulate a given control schedule")
    _common(p)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--controls", type=Path, help="controls.csv as written by optimize")
    group.add_argument("--constant", type=float, nargs=2, metavar=("U_P", "U_T"),
                       help="constant controls on every interval (default 0 0)")

    p = sub.add_parser("tail-check", help="end-of-horizon artifact heuristics")
    _common(p)
    p.add_argument("--no-horizon-sweep", action="store_true",
                   help="skip the re-runs on shortened horizons")
    return parser


def config_from_args(args) -> ScenarioConfig:
    config = load_config(args.config) if args.config else default_config()
    changes = {}
    if args.out is not None:
        changes["output_dir"] = args.out
    if args.x:
        changes["x_values"] = tuple(parse_fraction(v) for v in args.x)
    if args.horizon is not None:
        changes["t_f"] = args.horizon
    if args.b_lim is not None:
        changes["B_lim"] = args.b_lim
    solver = {k: getattr(args, k) for k in ("max_iter", "tol_constraint", "tol_kkt", "hessian")
              if getattr(args, k) is not None}
    if solver:
        config = config.with_solver(**solver)
    return config.replace(**changes) if changes else config


def _print_summary(rows):
    print("  ".join(f"{h:>16}" for h in SUMMARY_HEADER[:7]))
    for row in rows:
        cells = []
        for h in SUMMARY_HEADER[:7]:
            v = row[h]
            cells.append(f"{v:>16.6g}" if isinstance(v, float) else f"{v!s:>16}")
        print("  ".join(cells))


def cmd_calibrate(config: ScenarioConfig) -> int:
    c = config.calibration
    result = calibrate(config.params, prevalence_target=c.prevalence, treated_target=c.treated,
                       contact_ratio=c.contact_ratio)
    p = result.params
    print(f"lambda_H = {p.lambda_H:.6g}, lambda_L = {p.lambda_L:.6g}, baseline_tap = {p.baseline_tap:.6g}")
    print(f"equilibrium prevalence = {result.prevalence:.6f}, treated fraction = {result.treated_fraction:.6f}")
    path = write_calibration(result, Path(config.output_dir) / "calibration.csv")
    print(f"written {path}")
    return EXIT_OK


def cmd_optimize(config: ScenarioConfig) -> int:
    run = run_scenarios(config)
    _print_summary(run.summary())
    print(f"outputs in {run.output_dir}")
    if not run.converged:
        failed = ", ".join(str(r.x) for r in run.results if not r.converged)
        print(f"solver did not converge for x = {failed}; see diagnostics.txt", file=sys.stderr)
    return run.exit_status


def _load_schedule(path, dt) -> ControlSchedule:
    header, rows = read_table(path)
    if header != ("interval", "t_start", "u_P", "u_T"):
        raise ConfigError(f"{path} is not a control table")
    return ControlSchedule(dt, rows[:, 2:4])


def cmd_simulate(config: ScenarioConfig, args) -> int:
    params, _ = resolve_params(config)
    if args.controls is not None:
        schedule = _load_schedule(args.controls, config.dt)
    else:
        u = args.constant or (0.0, 0.0)
        schedule = ControlSchedule.constant(config.n_int, config.dt, *u)
    for x in config.x_values:
        p = params.replace(x=float(x))
        X0 = config.X0(p)
        ev = evaluate_policy(p, config.costs, X0, schedule, config.B_lim)
        directory = Path(config.output_dir) / x_label(x)
        emit_outputs(ev, schedule, directory, params=p)
        print(f"x = {x}: new infections {ev.total_cost:.6g}, deaths {ev.deaths:.6g}, "
              f"budget-feasible intervals {int(ev.feasible.sum())}/{schedule.n_int} -> {directory}")
    return EXIT_OK


def cmd_tail_check(config: ScenarioConfig, args) -> int:
    params, _ = resolve_params(config)
    results = [solve_scenario(config, x, params) for x in config.x_values]
    report = tail_artifact_analysis(config, results, horizon_sweep=not args.no_horizon_sweep)
    path = report.write(Path(config.output_dir) / "tail_report.json")
    for d in report.dominance:
        window = "none" if d.discard_window is None else f"[{d.discard_window[0]:g}, {d.discard_window[1]:g}]"
        print(f"x = {d.x}: last only-PrEP/only-TaP cost switch at {d.switch_time}, discard window {window}")
    for h in report.horizon:
        verdict = (f"recurring {h.artifact[0]} -> {h.artifact[1]} switch {h.artifact[2]:g} months "
                   f"before the end (artifact)" if h.recurring else "no recurring terminal switch")
        print(f"x = {h.x}: horizons {', '.join(f'{t:g}' for t in h.horizons)}: {verdict}")
    print(f"written {path}")
    converged = all(r.converged for r in results) and all(all(h.converged) for h in report.horizon)
    return EXIT_OK if converged else EXIT_NONCONVERGED


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = config_from_args(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "calibrate":
            return cmd_calibrate(config)
        if args.command == "optimize":
            return cmd_optimize(config)
        if args.command == "simulate":
            return cmd_simulate(config, args)
        return cmd_tail_check(config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
