"""Direct transcription of the budget-constrained control problem at LGR points.

Each control interval carries two state polynomials sampled at the LGR grid:
the controlled trajectory ``X`` and a zero-control baseline ``Xb`` that starts
from the same state.  The NLP unknowns are, per interval and contiguous in
memory, ``[X (n_pts x 9), Xb (n_pts x 9), U (2)]``.

Inside the NLP states are divided by the initial population ``N0``, controls
by ``control_scale`` and the budget rows by ``budget_scale``; the objective is
the incidence integral divided by ``N0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import model
from .model import CostParams, ModelParams, N_CONTROL, N_STATE
from .oracle import ControlSchedule
from .spectral import LgrScheme, lgr_scheme


@dataclass(frozen=True)
class CollocationGrid:
    n_int: int
    dt: float
    scheme: LgrScheme

    @property
    def n_cp(self) -> int:
        return self.scheme.n_cp

    @property
    def n_pts(self) -> int:
        return self.scheme.n_cp + 1

    @property
    def t_f(self) -> float:
        return self.n_int * self.dt

    @property
    def knots(self) -> np.ndarray:
        return self.dt * np.arange(self.n_int + 1)

    @property
    def tau(self) -> np.ndarray:
        """Grid times, shape ``(n_int, n_pts)``."""
        return self.knots[:-1, None] + 0.5 * self.dt * (self.scheme.points[None, :] + 1.0)


def build_grid(n_int: int, dt: float, n_cp: int) -> CollocationGrid:
    if n_int < 1 or not dt > 0 or n_cp < 2:
        raise ValueError(f"invalid grid: n_int={n_int}, dt={dt}, n_cp={n_cp}")
    return CollocationGrid(int(n_int), float(dt), lgr_scheme(int(n_cp)))


def _as_rhs(dynamics):
    """Accept model parameters or a plain ``f(X_rows, u) -> dX_rows`` callable."""
    if isinstance(dynamics, ModelParams):
        return lambda X, u: model.rhs(0.0, X, u, dynamics)
    return dynamics


def collocation_residuals(X_i, U_i, grid: CollocationGrid, dynamics):
    """``D X - (dt/2) F(X, U)`` at the ``n_cp`` collocation points."""
    X_i = np.asarray(X_i, dtype=float)
    f = _as_rhs(dynamics)
    return grid.scheme.diff_matrix @ X_i - 0.5 * grid.dt * f(X_i[1:], np.asarray(U_i, float))


def propagated_endpoint(X_i, U_i, grid: CollocationGrid, dynamics):
    """Interval start plus the LGR quadrature of the right-hand side."""
    X_i = np.asarray(X_i, dtype=float)
    F = _as_rhs(dynamics)(X_i, np.asarray(U_i, float))
    return X_i[0] + 0.5 * grid.dt * np.tensordot(grid.scheme.weights, F, axes=(0, 0))


def continuity_defect(X_i, U_i, X_next_start, grid: CollocationGrid, dynamics):
    return propagated_endpoint(X_i, U_i, grid, dynamics) - np.asarray(X_next_start, float)


def baseline_residuals(Xb_i, X_i, grid: CollocationGrid, dynamics):
    """Zero-control collocation residuals of the baseline and its anchor to the
    controlled trajectory's interval start."""
    Xb_i = np.asarray(Xb_i, dtype=float)
    zero = np.zeros(N_CONTROL) if isinstance(dynamics, ModelParams) else 0.0
    res = collocation_residuals(Xb_i, zero, grid, dynamics)
    return res, Xb_i[0] - np.asarray(X_i, float)[0]


def budget_inequality(X_i, Xb_i, U_i, grid: CollocationGrid, costs: CostParams, B_lim: float):
    """Excess spend over the zero-control baseline minus the limit (<= 0 is feasible)."""
    w = grid.scheme.weights
    spend = model.budget_rate(X_i, U_i, costs)
    base = model.budget_rate(Xb_i, np.zeros(N_CONTROL), costs)
    return 0.5 * grid.dt * w @ (spend - base) - B_lim


@dataclass(frozen=True)
class DecisionLayout:
    n_int: int
    n_pts: int
    n_state: int = N_STATE
    n_control: int = N_CONTROL

    @property
    def block(self) -> int:
        return 2 * self.n_pts * self.n_state + self.n_control

    @property
    def size(self) -> int:
        return self.n_int * self.block

    def _offsets(self):
        return self.block * np.arange(self.n_int)

    @property
    def state_index(self) -> np.ndarray:
        local = np.arange(self.n_pts * self.n_state).reshape(self.n_pts, self.n_state)
        return self._offsets()[:, None, None] + local

    @property
    def baseline_index(self) -> np.ndarray:
        return self.state_index + self.n_pts * self.n_state

    @property
    def control_index(self) -> np.ndarray:
        return self._offsets()[:, None] + 2 * self.n_pts * self.n_state + np.arange(self.n_control)

    def pack(self, X, Xb, U) -> np.ndarray:
        blocks = np.concatenate([np.reshape(X, (self.n_int, -1)), np.reshape(Xb, (self.n_int, -1)),
                                 np.reshape(U, (self.n_int, -1))], axis=1)
        return blocks.ravel()

    def unpack(self, z):
        blocks = np.asarray(z, dtype=float).reshape(self.n_int, self.block)
        m = self.n_pts * self.n_state
        shape = (self.n_int, self.n_pts, self.n_state)
        return blocks[:, :m].reshape(shape), blocks[:, m:2 * m].reshape(shape), blocks[:, 2 * m:]

    def blocks(self):
        return [np.arange(i * self.block, (i + 1) * self.block) for i in range(self.n_int)]


class CollocationTrajectory:
    """Piecewise polynomial state from a transcribed solution (unscaled)."""

    def __init__(self, grid: CollocationGrid, X, endpoint):
        self.grid = grid
        self.X = np.asarray(X, dtype=float)
        self.endpoint = np.asarray(endpoint, dtype=float)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        g = self.grid
        if np.any(t < -1e-9) or np.any(t > g.t_f + 1e-9):
            raise ValueError("t outside [0, t_f]")
        idx = np.clip(np.floor(t / g.dt + 1e-12).astype(int), 0, g.n_int - 1)
        out = np.empty((t.size, N_STATE))
        for i in np.unique(idx):
            mask = idx == i
            theta = 2.0 * (t[mask] - g.knots[i]) / g.dt - 1.0
            out[mask] = g.scheme.interpolate(self.X[i], theta)
        out[t >= g.t_f - 1e-12] = self.endpoint
        return out[0] if scalar else out


class TranscribedNlp:
    """Objective, constraints and their derivatives for the scaled NLP.

    Equality rows: initial condition (9), then per interval the controlled
    collocation block, the baseline collocation block, the baseline anchor and
    (except after the last interval) the continuity defect.
    """

    def __init__(self, grid: CollocationGrid, params: ModelParams, costs: CostParams, X0, B_lim: float,
                 control_scale: float = 1e-2, budget_scale: float | None = None):
        params.validate()
        costs.validate()
        X0 = np.asarray(X0, dtype=float)
        if X0.shape != (N_STATE,) or np.any(X0 < 0):
            raise ValueError("X0 must be a nonnegative 9-vector")
        if B_lim < 0:
            raise ValueError("B_lim must be >= 0")
        self.grid, self.params, self.costs = grid, params, costs
        self.X0, self.B_lim = X0, float(B_lim)
        self.layout = DecisionLayout(grid.n_int, grid.n_pts)
        self.N0 = float(X0.sum())
        if self.N0 <= 0:
            raise ValueError("initial population must be positive")
        self.control_scale = float(control_scale)
        if budget_scale is None:
            fallback = 1e-3 * self.N0 * max(costs.K_T_treat, costs.K_P_treat, 1.0) * grid.dt
            budget_scale = self.B_lim if self.B_lim > 0 else fallback
        self.budget_scale = float(budget_scale)
        self._h = 0.5 * grid.dt
        tau = grid.tau
        self._discount = np.exp(-costs.discount * tau) if costs.discount else np.ones_like(tau)
        self._rows_per_interval = 2 * grid.n_cp * N_STATE + 2 * N_STATE
        self._build_patterns()

    # ------------------------------------------------------------------ sizes
    @property
    def size(self) -> int:
        return self.layout.size

    @property
    def n_eq(self) -> int:
        return self.grid.n_int * self._rows_per_interval

    @property
    def n_ineq(self) -> int:
        return self.grid.n_int

    @property
    def hessian_blocks(self):
        return self.layout.blocks()

    @property
    def lower_bounds(self) -> np.ndarray:
        lb = np.full(self.size, -np.inf)
        lb[self.layout.control_index.ravel()] = 0.0
        return lb

    @property
    def upper_bounds(self) -> np.ndarray:
        return np.full(self.size, np.inf)

    @property
    def control_columns(self) -> np.ndarray:
        return self.layout.control_index.ravel()

    @property
    def state_columns(self) -> np.ndarray:
        mask = np.ones(self.size, bool)
        mask[self.control_columns] = False
        return np.flatnonzero(mask)

    # ------------------------------------------------------------ conversions
    def pack(self, X, Xb, U) -> np.ndarray:
        """Scaled decision vector from unscaled grid states and controls."""
        return self.layout.pack(np.asarray(X) / self.N0, np.asarray(Xb) / self.N0,
                                np.asarray(U) / self.control_scale)

    def unpack(self, z):
        """Unscaled ``(X, Xb, U)`` from a decision vector."""
        Xs, Xbs, Us = self.layout.unpack(z)
        return Xs * self.N0, Xbs * self.N0, Us * self.control_scale

    def pack_trajectories(self, controlled, baselines, schedule: ControlSchedule) -> np.ndarray:
        """Sample an oracle trajectory and its per-interval baselines on the grid."""
        tau = self.grid.tau
        X = controlled(tau.ravel()).reshape(tau.shape + (N_STATE,))[..., :N_STATE]
        Xb = np.stack([b(tau[i])[..., :N_STATE] for i, b in enumerate(baselines)])
        return self.pack(X, Xb, schedule.values)

    def initial_guess(self, kind: str = "simulate", level: float = 1e-3) -> np.ndarray:
        """Starting point for the solver.

        ``constant``: X0 replicated, zero controls.  ``aggressive``: the same
        states with both controls at ``level``.  ``simulate``: zero controls
        with the states solving the collocation equations (equality-feasible).
        """
        g = self.grid
        U = np.zeros((g.n_int, N_CONTROL))
        if kind in ("constant", "aggressive"):
            X = np.broadcast_to(self.X0, (g.n_int, g.n_pts, N_STATE))
            if kind == "aggressive":
                U[:] = level
            return self.pack(X, X, U)
        if kind == "simulate":
            return self.solve_states(U)
        raise ValueError(f"unknown initial guess kind {kind!r}")

    # --------------------------------------------------------------- dynamics
    def _fields(self, z):
        Xs, Xbs, Us = self.layout.unpack(z)
        u = Us * self.control_scale
        X, Xb = Xs * self.N0, Xbs * self.N0
        return Xs, Xbs, Us, X, Xb, u

    def _rhs_scaled(self, X, u):
        return model.rhs(0.0, X, u, self.params) / self.N0

    # -------------------------------------------------------------- objective
    def objective(self, z) -> float:
        _, _, _, X, _, _ = self._fields(z)
        C = model.incidence_cost(X, self.params) / self.N0
        return float(self._h * np.sum(self.grid.scheme.weights * self._discount * C))

    def objective_gradient(self, z) -> np.ndarray:
        _, _, _, X, _, _ = self._fields(z)
        gC = model.incidence_cost_gradient(X, self.params)  # d(C/N0)/d(X/N0) = dC/dX
        coef = self._h * self.grid.scheme.weights * self._discount
        grad = np.zeros(self.size)
        grad[self.layout.state_index.ravel()] = (coef[..., None] * gC).ravel()
        return grad

    def unscaled_objective(self, z) -> float:
        return self.objective(z) * self.N0

    # ------------------------------------------------------------ constraints
    def eq_constraints(self, z) -> np.ndarray:
        Xs, Xbs, _, X, Xb, u = self._fields(z)
        g, h, w = self.grid, self._h, self.grid.scheme.weights
        D = g.scheme.diff_matrix
        F = self._rhs_scaled(X, u[:, None, :])
        Fb = self._rhs_scaled(Xb, np.zeros(N_CONTROL))
        colloc = np.einsum("kl,ilj->ikj", D, Xs) - h * F[:, 1:]
        base = np.einsum("kl,ilj->ikj", D, Xbs) - h * Fb[:, 1:]
        anchor = Xbs[:, 0] - Xs[:, 0]
        end = Xs[:, 0] + h * np.einsum("k,ikj->ij", w, F)
        defect = np.zeros_like(end)
        defect[:-1] = end[:-1] - Xs[1:, 0]
        rows = np.concatenate([colloc.reshape(g.n_int, -1), base.reshape(g.n_int, -1), anchor, defect], axis=1)
        ic = Xs[0, 0] - self.X0 / self.N0
        return np.concatenate([ic, rows.ravel()[:-N_STATE]])

    def ineq_constraints(self, z) -> np.ndarray:
        _, _, _, X, Xb, u = self._fields(z)
        w = self.grid.scheme.weights
        spend = model.budget_rate(X, u[:, None, :], self.costs)
        base = model.budget_rate(Xb, np.zeros(N_CONTROL), self.costs)
        excess = self._h * (spend - base) @ w
        return (excess - self.B_lim) / self.budget_scale

    def ineq_jacobian(self, z):
        _, _, _, X, Xb, u = self._fields(z)
        g, lay, w = self.grid, self.layout, self.grid.scheme.weights
        gx, gu = model.budget_rate_gradient(X, u[:, None, :], self.costs)
        gxb, _ = model.budget_rate_gradient(Xb, np.zeros(N_CONTROL), self.costs)
        c = self._h * w[None, :, None] / self.budget_scale
        dX = c * gx * self.N0
        dXb = -c * gxb * self.N0
        dU = self._h * np.einsum("k,ikc->ic", w, gu) * self.control_scale / self.budget_scale
        rows = np.concatenate([np.repeat(np.arange(g.n_int), g.n_pts * N_STATE)] * 2
                              + [np.repeat(np.arange(g.n_int), N_CONTROL)])
        cols = np.concatenate([lay.state_index.ravel(), lay.baseline_index.ravel(), lay.control_index.ravel()])
        data = np.concatenate([dX.ravel(), dXb.ravel(), dU.ravel()])
        return sp.csr_matrix((data, (rows, cols)), shape=(g.n_int, self.size))

    # ---------------------------------------------------- equality Jacobian
    def _local_blocks(self, z):
        """Dense per-interval Jacobian blocks over the interval's own columns,
        shape ``(n_int, rows_per_interval, block)``."""
        _, _, _, X, Xb, u = self._fields(z)
        g, h, w = self.grid, self._h, self.grid.scheme.weights
        D = g.scheme.diff_matrix
        nc, npt, n = g.n_cp, g.n_pts, N_STATE
        JX, JU = model.rhs_jacobian(X, u[:, None, :], self.params)
        JXb, _ = model.rhs_jacobian(Xb, np.zeros(N_CONTROL), self.params)
        JU = JU * self.control_scale / self.N0
        L = np.zeros((g.n_int, self._rows_per_interval, self.layout.block))
        m = npt * n
        eye = np.eye(n)
        Dterm = np.einsum("kl,jm->kjlm", D, eye)
        for blk, J, col0 in ((0, JX, 0), (1, JXb, m)):
            C = np.broadcast_to(Dterm, (g.n_int,) + Dterm.shape).copy()
            for k in range(nc):
                C[:, k, :, k + 1, :] -= h * J[:, k + 1]
            r0 = blk * nc * n
            L[:, r0:r0 + nc * n, col0:col0 + m] = C.reshape(g.n_int, nc * n, m)
        L[:, :nc * n, 2 * m:] = -h * JU[:, 1:].reshape(g.n_int, nc * n, N_CONTROL)
        r_anchor = 2 * nc * n
        L[:, r_anchor:r_anchor + n, m:m + n] = eye
        L[:, r_anchor:r_anchor + n, :n] = -eye
        r_def = r_anchor + n
        Jdef = h * w[None, :, None, None] * JX                         # (n_int, npt, n, n)
        Jdef[:, 0] += eye
        L[:, r_def:r_def + n, :m] = Jdef.transpose(0, 2, 1, 3).reshape(g.n_int, n, m)
        L[:, r_def:r_def + n, 2 * m:] = h * np.einsum("k,ikjc->ijc", w, JU)
        return L

    def _build_patterns(self):
        g, lay = self.grid, self.layout
        rng = np.random.default_rng(12345)
        mask = np.zeros((g.n_int, self._rows_per_interval, lay.block), bool)
        for _ in range(2):
            X = self.N0 * rng.uniform(0.01, 0.2, size=(g.n_int, g.n_pts, N_STATE))
            U = rng.uniform(0.5, 1.5, size=(g.n_int, N_CONTROL))
            mask |= self._local_blocks(lay.pack(X / self.N0, X / self.N0, U)) != 0
        mask[-1, -N_STATE:, :] = False
        self._mask = mask
        i, r, c = np.nonzero(mask)
        rows = N_STATE + i * self._rows_per_interval + r
        cols = i * lay.block + c
        # defect coupling into the next interval's start, and the initial condition
        r_def = 2 * g.n_cp * N_STATE + N_STATE
        ii, jj = np.meshgrid(np.arange(g.n_int - 1), np.arange(N_STATE), indexing="ij")
        cpl_rows = (N_STATE + ii * self._rows_per_interval + r_def + jj).ravel()
        cpl_cols = lay.state_index[1:, 0, :].ravel()
        ic_rows = np.arange(N_STATE)
        ic_cols = lay.state_index[0, 0, :]
        self._jac_rows = np.concatenate([rows, cpl_rows, ic_rows])
        self._jac_cols = np.concatenate([cols, cpl_cols, ic_cols])
        self._n_fixed = cpl_rows.size + ic_rows.size
        self._fixed_data = np.concatenate([-np.ones(cpl_rows.size), np.ones(ic_rows.size)])

    def eq_jacobian(self, z):
        data = np.concatenate([self._local_blocks(z)[self._mask], self._fixed_data])
        return sp.csr_matrix((data, (self._jac_rows, self._jac_cols)), shape=(self.n_eq, self.size))

    @property
    def eq_sparsity(self):
        ones = np.ones(self._jac_rows.size, bool)
        return sp.csr_matrix((ones, (self._jac_rows, self._jac_cols)), shape=(self.n_eq, self.size))

    @property
    def ineq_sparsity(self):
        return self.ineq_jacobian(np.ones(self.size)) != 0

    # ------------------------------------------------------------ utilities
    def problem(self):
        from .sqp import NlpProblem
        return NlpProblem(n=self.size, f=self.objective, grad=self.objective_gradient,
                          eq=self.eq_constraints, jac_eq=self.eq_jacobian,
                          ineq=self.ineq_constraints, jac_ineq=self.ineq_jacobian,
                          lb=self.lower_bounds, ub=self.upper_bounds,
                          eq_sparsity=self.eq_sparsity, ineq_sparsity=self.ineq_sparsity,
                          hessian_blocks=self.hessian_blocks, independent=self.control_columns)

    def _solve_interval(self, start, u, tol=1e-14, max_iter=50):
        """Collocation states of one interval from its start (scaled), by Newton."""
        g, h = self.grid, self._h
        D = g.scheme.diff_matrix
        nc, n = g.n_cp, N_STATE
        Xs = np.tile(start, (g.n_pts, 1))
        for _ in range(max_iter):
            F = self._rhs_scaled(Xs * self.N0, u)
            res = (D @ Xs - h * F[1:]).ravel()
            if np.max(np.abs(res)) <= tol:
                break
            J = model.rhs_jacobian(Xs[1:] * self.N0, u, self.params)[0]
            A = np.kron(D[:, 1:], np.eye(n))
            for k in range(nc):
                A[k * n:(k + 1) * n, k * n:(k + 1) * n] -= h * J[k]
            Xs[1:] -= np.linalg.solve(A, res).reshape(nc, n)
        return Xs

    def march(self, U) -> np.ndarray:
        """Interval-by-interval solution of the equality system for fixed
        unscaled controls ``U``; each interval is started from the previous
        interval's quadrature-propagated endpoint."""
        g = self.grid
        U = np.asarray(U, dtype=float).reshape(g.n_int, N_CONTROL)
        Xs = np.empty((g.n_int, g.n_pts, N_STATE))
        Xbs = np.empty_like(Xs)
        start = self.X0 / self.N0
        for i in range(g.n_int):
            Xs[i] = self._solve_interval(start, U[i])
            Xbs[i] = self._solve_interval(start, np.zeros(N_CONTROL))
            F = self._rhs_scaled(Xs[i] * self.N0, U[i])
            start = Xs[i, 0] + self._h * g.scheme.weights @ F
        return self.layout.pack(Xs, Xbs, U / self.control_scale)

    def solve_states(self, U, z0=None, tol: float = 1e-13, max_iter: int = 50) -> np.ndarray:
        """Solve the equality system for the states with the controls ``U``
        (unscaled, ``(n_int, 2)``) held fixed.  Damped global Newton from
        ``z0``, by default the marched solution."""
        if z0 is None:
            z0 = self.march(U)
        z = np.array(z0, dtype=float)
        z[self.control_columns] = np.asarray(U, float).ravel() / self.control_scale
        cols = self.state_columns
        c = self.eq_constraints(z)
        for _ in range(max_iter):
            norm = np.max(np.abs(c))
            if norm <= tol:
                return z
            step = splu(self.eq_jacobian(z)[:, cols].tocsc()).solve(-c)
            alpha = 1.0
            while alpha > 1e-6:
                trial = z.copy()
                trial[cols] += alpha * step
                c_trial = self.eq_constraints(trial)
                if np.max(np.abs(c_trial)) < (1 - 1e-4 * alpha) * norm or alpha == 1.0 and norm < 1e-8:
                    break
                alpha *= 0.5
            z, c = trial, c_trial
        if np.max(np.abs(c)) > 1e3 * tol:
            raise RuntimeError(f"state solve did not converge: residual {np.max(np.abs(c)):.2e}")
        return z

    def negative_excursions(self, z, rel: float = 1e-6):
        X, Xb, _ = self.unpack(z)
        return float(min(X.min(), Xb.min())) < -rel * self.N0

    def extract_solution(self, z):
        X, _, U = self.unpack(z)
        U = np.maximum(U, 0.0)
        schedule = ControlSchedule(self.grid.dt, U)
        endpoint = propagated_endpoint(X[-1], U[-1], self.grid, self.params)
        return schedule, CollocationTrajectory(self.grid, X, endpoint)


def build_nlp(grid: CollocationGrid, params: ModelParams, costs: CostParams, X0, B_lim: float,
              **kwargs) -> TranscribedNlp:
    return TranscribedNlp(grid, params, costs, X0, B_lim, **kwargs)
