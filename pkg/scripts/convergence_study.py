"""Collocation convergence: transcription trajectory against the adaptive
integrator for increasing points per interval, and the optimised objective
of one scenario as the interval count grows.

    python scripts/convergence_study.py [--optimize]
"""
import argparse
from fractions import Fraction

import numpy as np

from hivoc.config import default_config
from hivoc.oracle import ControlSchedule, integrate
from hivoc.scenarios import solve_scenario
from hivoc.transcribe import build_grid, build_nlp


def state_error_table(config, n_cps=(2, 3, 4, 5, 6, 7, 8)):
    params = config.params.replace(x=1 / 12)
    X0 = config.X0(params)
    n_int = config.n_int
    U = np.tile([2e-3, 1e-3], (n_int, 1))
    U[::3] = [0.0, 4e-3]
    ref = integrate(params, X0, ControlSchedule(config.dt, U), rtol=1e-11, abs_tol=1e-9)
    t = np.arange(int(config.t_f) + 1, dtype=float)
    print(f"{'n_cp':>5} {'max rel. state error':>22}")
    for n_cp in n_cps:
        nlp = build_nlp(build_grid(n_int, config.dt, n_cp), params, config.costs, X0, config.B_lim)
        _, traj = nlp.extract_solution(nlp.solve_states(U))
        err = np.linalg.norm(traj(t) - ref(t), axis=1) / np.linalg.norm(ref(t), axis=1)
        print(f"{n_cp:>5} {err.max():22.3e}")


def objective_table(config, x=Fraction(1, 12), dts=(24.0, 12.0, 6.0)):
    print(f"{'dt':>5} {'n_int':>6} {'objective':>12} {'re-simulated':>13} {'iterations':>11}")
    for dt in dts:
        c = config.replace(dt=dt)
        r = solve_scenario(c, x)
        print(f"{dt:5g} {c.n_int:>6} {r.objective:12.2f} {r.new_infections:13.2f} {r.solver.iterations:>11}")


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--horizon", type=float, default=120.0)
    parser.add_argument("--optimize", action="store_true", help="also re-solve with finer control grids")
    args = parser.parse_args(argv)
    config = default_config().with_horizon(args.horizon)
    state_error_table(config)
    if args.optimize:
        objective_table(config)


if __name__ == "__main__":
    main()
