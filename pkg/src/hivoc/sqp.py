"""Line-search SQP for smooth problems

    min f(x)  s.t.  c_E(x) = 0,  c_I(x) <= 0,  lb <= x <= ub.

Each iteration solves a convex QP built from the constraint linearisations and
a damped-BFGS model of the Lagrangian Hessian, then globalises with a
backtracking search on the l1 merit function ``f + mu (|c_E|_1 + |c_I^+|_1)``.

The QP is solved in its dual: the equality-constrained KKT matrix is factored
once (sparse LU) and the inequality multipliers follow from a small dense
dual active-set iteration.  When the linearised inequalities are inconsistent
the general rows are relaxed by quadratically penalised slacks (elastic mode).

If the Lagrangian is partially separable (``hessian_blocks``) the quasi-Newton
matrix is kept block diagonal, which preserves sparsity in the KKT system.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

log = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITER = "max-iter"
LINE_SEARCH_FAILURE = "line-search-failure"
INFEASIBLE = "infeasible"


def _column_groups(sparsity) -> list:
    """Greedy colouring of structurally orthogonal columns."""
    S = sp.csc_matrix(sparsity, dtype=bool)
    m, n = S.shape
    groups, occupied = [], []
    for j in range(n):
        rows = S.indices[S.indptr[j]:S.indptr[j + 1]]
        for g, occ in enumerate(occupied):
            if not occ[rows].any():
                groups[g].append(j)
                occ[rows] = True
                break
        else:
            occ = np.zeros(m, bool)
            occ[rows] = True
            occupied.append(occ)
            groups.append([j])
    return [np.array(g) for g in groups]


def fd_jacobian(fun: Callable, x, step: float = 1e-6, sparsity=None):
    """Centred-difference Jacobian of a vector function.

    With a ``sparsity`` pattern, structurally orthogonal columns are perturbed
    together and only declared entries are filled; the result is then CSR.
    """
    x = np.asarray(x, dtype=float)
    h = step * np.maximum(1.0, np.abs(x))
    if sparsity is None:
        cols = [np.asarray(fun(x + h[j] * _unit(x.size, j))) - np.asarray(fun(x - h[j] * _unit(x.size, j)))
                for j in range(x.size)]
        return np.column_stack(cols) / (2.0 * h) if cols else np.zeros((0, 0))
    S = sp.csc_matrix(sparsity, dtype=bool)
    rows_out, cols_out, vals = [], [], []
    for group in _column_groups(S):
        e = np.zeros_like(x)
        e[group] = h[group]
        diff = (np.asarray(fun(x + e)) - np.asarray(fun(x - e)))
        for j in group:
            rows = S.indices[S.indptr[j]:S.indptr[j + 1]]
            rows_out.append(rows)
            cols_out.append(np.full(rows.size, j))
            vals.append(diff[rows] / (2.0 * h[j]))
    if not vals:
        return sp.csr_matrix(S.shape)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows_out), np.concatenate(cols_out))),
                         shape=S.shape)


def _unit(n, j):
    e = np.zeros(n)
    e[j] = 1.0
    return e


@dataclass
class NlpProblem:
    n: int
    f: Callable
    grad: Callable | None = None
    eq: Callable | None = None
    jac_eq: Callable | None = None
    ineq: Callable | None = None
    jac_ineq: Callable | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    eq_sparsity: object = None
    ineq_sparsity: object = None
    hessian_blocks: list | None = None
    independent: np.ndarray | None = None

    def __post_init__(self):
        self.lb = np.full(self.n, -np.inf) if self.lb is None else np.asarray(self.lb, float)
        self.ub = np.full(self.n, np.inf) if self.ub is None else np.asarray(self.ub, float)
        if self.lb.shape != (self.n,) or self.ub.shape != (self.n,):
            raise ValueError("bounds must have length n")
        if np.any(self.lb > self.ub):
            raise ValueError("lower bound exceeds upper bound")

    # evaluators returning empty arrays when a constraint class is absent
    def c_eq(self, x):
        return np.zeros(0) if self.eq is None else np.atleast_1d(np.asarray(self.eq(x), float))

    def c_ineq(self, x):
        return np.zeros(0) if self.ineq is None else np.atleast_1d(np.asarray(self.ineq(x), float))

    def gradient(self, x, step=1e-6):
        if self.grad is not None:
            return np.asarray(self.grad(x), float)
        return fd_jacobian(lambda z: np.atleast_1d(self.f(z)), x, step)[0]

    def _jac(self, jac, fun, sparsity, x, step, m):
        if m == 0:
            return sp.csr_matrix((0, self.n))
        if jac is not None:
            J = jac(x)
        else:
            J = fd_jacobian(fun, x, step, sparsity)
        return sp.csr_matrix(np.atleast_2d(J) if not sp.issparse(J) else J)

    def J_eq(self, x, step=1e-6, m=None):
        m = self.c_eq(x).size if m is None else m
        return self._jac(self.jac_eq, self.c_eq, self.eq_sparsity, x, step, m)

    def J_ineq(self, x, step=1e-6, m=None):
        m = self.c_ineq(x).size if m is None else m
        return self._jac(self.jac_ineq, self.c_ineq, self.ineq_sparsity, x, step, m)


@dataclass
class SolverOptions:
    max_iter: int = 500
    tol_constraint: float = 1e-6
    tol_kkt: float = 1e-5
    tol_step: float = 1e-14
    penalty_init: float = 1.0
    penalty_factor: float = 2.0
    armijo: float = 1e-4
    min_alpha: float = 1e-10
    fd_step: float = 1e-6
    hessian: str = "bfgs"
    hessian_init: float = 1.0
    soc_steps: int = 5
    elastic_penalty: float = 1e3
    callback: Callable | None = None

    def __post_init__(self):
        for name in ("tol_constraint", "tol_kkt", "tol_step", "fd_step", "penalty_init", "hessian_init"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.hessian not in ("bfgs", "fd"):
            raise ValueError("hessian must be 'bfgs' or 'fd'")


@dataclass
class Multipliers:
    eq: np.ndarray
    ineq: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


@dataclass
class SolverResult:
    x: np.ndarray
    fun: float
    violation: float
    kkt: float
    iterations: int
    status: str
    multipliers: Multipliers
    history: list = field(default_factory=list, repr=False)
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def violation(problem: NlpProblem, x) -> float:
    """Max-norm constraint violation including bounds."""
    parts = [0.0]
    ce, ci = problem.c_eq(x), problem.c_ineq(x)
    if ce.size:
        parts.append(np.max(np.abs(ce)))
    if ci.size:
        parts.append(np.max(ci))
    parts.append(np.max(problem.lb - x, initial=0.0))
    parts.append(np.max(x - problem.ub, initial=0.0))
    return float(max(parts))


def kkt_residual(problem: NlpProblem, x, multipliers: Multipliers, step: float = 1e-6) -> float:
    """Max of Lagrangian-gradient norm, complementarity, dual infeasibility and
    primal infeasibility (all in the max norm)."""
    x = np.asarray(x, dtype=float)
    mu = multipliers
    grad = problem.gradient(x, step)
    if mu.eq.size:
        grad = grad + problem.J_eq(x, step).T @ mu.eq
    ci = problem.c_ineq(x)
    if mu.ineq.size:
        grad = grad + problem.J_ineq(x, step).T @ mu.ineq
    grad = grad - mu.lower + mu.upper
    fin_lo, fin_up = np.isfinite(problem.lb), np.isfinite(problem.ub)
    comp = [0.0]
    if ci.size:
        comp.append(np.max(np.abs(mu.ineq * ci)))
    if fin_lo.any():
        comp.append(np.max(np.abs(mu.lower[fin_lo] * (x - problem.lb)[fin_lo])))
    if fin_up.any():
        comp.append(np.max(np.abs(mu.upper[fin_up] * (problem.ub - x)[fin_up])))
    dual = max(0.0, -np.min(mu.ineq, initial=0.0), -np.min(mu.lower, initial=0.0),
               -np.min(mu.upper, initial=0.0))
    return float(max(np.max(np.abs(grad), initial=0.0), max(comp), dual, violation(problem, x)))


# ---------------------------------------------------------------------------
# QP subproblem

def _dual_active_set(G, q, tol=1e-10, max_iter=None):
    """Minimise ``1/2 l'Gl + q'l`` over ``l >= 0`` for PSD ``G`` by a dual
    active-set method in the style of Goldfarb and Idnani.

    ``s = q + G l`` is the primal slack of each inequality.  The most violated
    row is added; rows that would make the active set linearly dependent (in
    the metric ``G``) first force out an active row.  Returns ``None`` if a
    violated row cannot be satisfied, i.e. the primal QP is infeasible.
    """
    m = q.size
    lam = np.zeros(m)
    if m == 0:
        return lam
    scale = np.sqrt(np.maximum(np.diag(G), 1e-300))
    absG = np.abs(G)
    active: list = []
    max_iter = max_iter or 10 * m + 50
    for _ in range(max_iter):
        s = q + G @ lam
        # a slack is only resolved relative to the terms that cancel in it
        noise = tol * (1.0 + (np.abs(q) + absG @ lam) / scale)
        viol = s / scale + noise
        viol[active] = np.inf
        j = int(np.argmin(viol))
        if viol[j] >= 0.0:
            return lam
        # add row j, possibly after dropping blocking rows
        while True:
            A = np.array(active, dtype=int)
            if A.size:
                r = np.linalg.solve(G[np.ix_(A, A)], G[A, j])
                zeta = G[j, j] - G[j, A] @ r
            else:
                r = np.zeros(0)
                zeta = G[j, j]
            sj = q[j] + G[j] @ lam
            t2 = -sj / zeta if zeta > 1e-10 * G[j, j] + 1e-300 else np.inf
            t1, k = np.inf, -1
            for idx, rk in enumerate(r):
                if rk > 1e-12 * max(1.0, np.max(np.abs(r))):
                    ratio = lam[A[idx]] / rk
                    if ratio < t1:
                        t1, k = ratio, idx
            t = min(t1, t2)
            if not np.isfinite(t):
                return None
            if A.size:
                lam[A] -= t * r
            lam[j] += t
            if t2 <= t1:
                active.append(j)
                lam[A] = np.maximum(lam[A], 0.0)
                break
            lam[A[k]] = 0.0
            active.pop(k)
    log.warning("dual active-set QP reached its iteration limit")
    return lam


class _Kkt:
    """Factored equality-constrained KKT matrix ``[[H, A'], [A, -reg I]]``."""

    def __init__(self, H, A):
        self.n, self.m = H.shape[0], A.shape[0]
        reg = 0.0
        for _ in range(8):
            K = sp.bmat([[H, A.T], [A, -reg * sp.identity(self.m) if self.m else None]], format="csc") \
                if self.m else sp.csc_matrix(H)
            try:
                self.lu = splu(K)
                probe = self.lu.solve(np.ones(self.n + self.m))
                if np.all(np.isfinite(probe)):
                    return
            except RuntimeError:
                pass
            reg = 1e-10 if reg == 0 else reg * 100
        raise np.linalg.LinAlgError("KKT matrix could not be factored")

    def solve(self, top, bottom):
        rhs = np.concatenate([top, bottom], axis=0)
        sol = self.lu.solve(rhs)
        return sol[:self.n], sol[self.n:]


def _solve_qp(kkt, g, ce, Ai, ci, soft=None):
    """Step and multipliers ``(p, nu, lam)`` of the QP subproblem, or ``None``
    if its linearised constraints are inconsistent.

    ``soft`` optionally gives, per inequality row, a quadratic slack penalty
    ``rho``: the row becomes ``Ai p + ci <= t`` with ``rho t^2 / 2`` added to
    the objective (elastic mode).  In the dual this is a diagonal shift.
    """
    p0, nu0 = kkt.solve(-g, -ce)
    if Ai.shape[0] == 0:
        return p0, nu0, np.zeros(0)
    AiT = Ai.T.toarray()
    Mp, Mnu = kkt.solve(AiT, np.zeros((kkt.m, Ai.shape[0])))
    G = Ai @ Mp
    G = 0.5 * (G + G.T)
    if soft is not None:
        G[np.diag_indices_from(G)] += np.where(np.isfinite(soft), 1.0 / soft, 0.0)
    q = -(Ai @ p0 + ci)
    lam = _dual_active_set(G, q)
    if lam is None:
        return None
    return p0 - Mp @ lam, nu0 - Mnu @ lam, lam


# ---------------------------------------------------------------------------
# Hessian models

class BlockBfgs:
    """Block-diagonal damped BFGS approximation (Powell damping, 0.2).

    An update is discarded when it would leave a block numerically
    indefinite or with condition number above ``max_cond``.
    """

    def __init__(self, n, blocks=None, init=1.0, max_cond=1e12):
        self.n = n
        self.blocks = [np.arange(n)] if blocks is None else [np.asarray(b) for b in blocks]
        self.init = init
        self.max_cond = max_cond
        self.reset()

    def reset(self):
        self.H = [self.init * np.eye(b.size) for b in self.blocks]
        self.fresh = [True] * len(self.blocks)

    def _acceptable(self, B):
        try:
            L = np.linalg.cholesky(B)
        except np.linalg.LinAlgError:
            return False
        d = np.diag(L) ** 2
        return d.min() > 0 and d.max() / d.min() < self.max_cond

    def update(self, s, y):
        for k, idx in enumerate(self.blocks):
            sb, yb = s[idx], y[idx]
            ns = np.linalg.norm(sb)
            if ns == 0:
                continue
            B = self.H[k]
            sy = sb @ yb
            if self.fresh[k] and sy > 1e-8 * ns * np.linalg.norm(yb):
                # Rayleigh quotient: inside the curvature spectrum, so the
                # first updates are not damped away
                B = np.clip(sy / (sb @ sb), 1e-6, 1e6) * self.init * np.eye(idx.size)
                self.fresh[k] = False
            Bs = B @ sb
            sBs = sb @ Bs
            if sBs <= 1e-300:
                continue
            theta = 1.0 if sy >= 0.2 * sBs else 0.8 * sBs / (sBs - sy)
            r = theta * yb + (1 - theta) * Bs
            new = B + np.outer(r, r) / (sb @ r) - np.outer(Bs, Bs) / sBs
            new = 0.5 * (new + new.T)
            if self._acceptable(new):
                self.H[k] = new
            elif B is not self.H[k] and self._acceptable(B):
                self.H[k] = B

    def matrix(self):
        return _block_matrix(self.blocks, self.H, self.n)


def _block_matrix(blocks, mats, n):
    rows = np.concatenate([np.repeat(b, b.size) for b in blocks])
    cols = np.concatenate([np.tile(b, b.size) for b in blocks])
    data = np.concatenate([M.ravel() for M in mats])
    return sp.csc_matrix((data, (rows, cols)), shape=(n, n))


def fd_hessian(grad_lagrangian, x, blocks=None, step=1e-5, floor=1e-4, clip=True):
    """Block-diagonal centred-difference Hessian of the Lagrangian.  With
    ``clip`` each block's eigenvalues are floored (positive definite result).

    With ``blocks`` the Lagrangian must be separable across them; then one
    variable of every block is perturbed per gradient pair.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    blocks = [np.arange(n)] if blocks is None else [np.asarray(b) for b in blocks]
    mats = [np.empty((b.size, b.size)) for b in blocks]
    h = step * np.maximum(1.0, np.abs(x))
    for j in range(max(b.size for b in blocks)):
        members = [k for k, b in enumerate(blocks) if j < b.size]
        cols = np.array([blocks[k][j] for k in members])
        e = np.zeros(n)
        e[cols] = h[cols]
        diff = grad_lagrangian(x + e) - grad_lagrangian(x - e)
        for k, c in zip(members, cols):
            mats[k][:, j] = diff[blocks[k]] / (2.0 * h[c])
    for k, M in enumerate(mats):
        if not clip:
            mats[k] = 0.5 * (M + M.T)
            continue
        vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
        vals = np.maximum(vals, floor * max(1.0, np.max(np.abs(vals))))
        mats[k] = (vecs * vals) @ vecs.T
    return _block_matrix(blocks, mats, n)


# ---------------------------------------------------------------------------

@dataclass
class _Point:
    x: np.ndarray
    f: float
    g: np.ndarray
    ce: np.ndarray
    ci: np.ndarray
    Je: sp.csr_matrix
    Ji: sp.csr_matrix

    def l1(self):
        return float(np.sum(np.abs(self.ce)) + np.sum(np.maximum(self.ci, 0.0)))


def _lagrangian_gradient(pt, mult, with_eq=True):
    gl = pt.g - mult.lower + mult.upper
    if with_eq and pt.ce.size:
        gl = gl + pt.Je.T @ mult.eq
    if pt.ci.size:
        gl = gl + pt.Ji.T @ mult.ineq
    return gl


class _FullSpace:
    """QP steps with a (block) quasi-Newton or finite-difference Hessian in
    all variables."""

    def __init__(self, problem, opt):
        self.problem, self.opt = problem, opt
        self.bfgs = BlockBfgs(problem.n, problem.hessian_blocks, opt.hessian_init)

    def reset(self):
        self.bfgs.reset()

    def prepare(self, pt, mult):
        if self.opt.hessian == "fd":
            self.H = fd_hessian(self._gl_function(mult), pt.x, self.problem.hessian_blocks)
        else:
            self.H = self.bfgs.matrix()
        self.pt = pt
        self.kkt = _Kkt(self.H, pt.Je)

    def _gl_function(self, mult):
        prob, step = self.problem, self.opt.fd_step
        m_e, m_i = mult.eq.size, mult.ineq.size

        def gl(z):
            out = prob.gradient(z, step)
            if m_e:
                out = out + prob.J_eq(z, step, m_e).T @ mult.eq
            if m_i:
                out = out + prob.J_ineq(z, step, m_i).T @ mult.ineq
            return out
        return gl

    def qp(self, Ai, ci, soft=None):
        return _solve_qp(self.kkt, self.pt.g, self.pt.ce, Ai, ci, soft)

    def set_active(self, Ai, act):
        self.Ai_act = Ai[act]
        self.corr_kkt = None

    def correction(self, xt, act_gen):
        if self.corr_kkt is None:
            rows = sp.vstack([self.pt.Je, self.Ai_act]).tocsr()
            self.corr_kkt = self.kkt if self.Ai_act.shape[0] == 0 else _Kkt(self.H, rows)
        ce = self.problem.c_eq(xt)
        ci = self.problem.c_ineq(xt)[act_gen] if act_gen.size else np.zeros(0)
        rhs = np.concatenate([ce, ci, np.zeros(self.Ai_act.shape[0] - act_gen.size)])
        d, _ = self.corr_kkt.solve(np.zeros(self.problem.n), -rhs)
        return d

    def update(self, pt, new, mult):
        if self.opt.hessian == "bfgs":
            self.bfgs.update(new.x - pt.x, _lagrangian_gradient(new, mult) - _lagrangian_gradient(pt, mult))


class _ReducedSpace:
    """Coordinate-basis reduced-space steps.

    The variables outside ``problem.independent`` are eliminated through the
    equality constraints (their Jacobian block must be square and
    nonsingular).  The quasi-Newton matrix approximates the reduced Hessian of
    the Lagrangian, and the QP lives in the independent variables only.
    """

    def __init__(self, problem, opt, m_e):
        self.problem, self.opt = problem, opt
        n = problem.n
        self.indep = np.asarray(problem.independent, dtype=int)
        mask = np.ones(n, bool)
        mask[self.indep] = False
        self.dep = np.flatnonzero(mask)
        if self.dep.size != m_e:
            raise ValueError(f"{self.dep.size} dependent variables for {m_e} equality constraints")
        self.bfgs = BlockBfgs(self.indep.size, None, opt.hessian_init)
        self.pending = None

    def reset(self):
        self.bfgs.reset()
        self.pending = None

    def prepare(self, pt, mult):
        n, k = self.problem.n, self.indep.size
        Je = pt.Je.tocsc()
        self.lu = splu(Je[:, self.dep].tocsc())
        Zd = -self.lu.solve(Je[:, self.indep].toarray())
        Z = np.zeros((n, k))
        Z[self.dep] = Zd
        Z[self.indep, np.arange(k)] = 1.0
        self.Z, self.pt = Z, pt
        if self.pending is not None:
            s_z, zg_old, m_old = self.pending
            self.bfgs.update(s_z, Z.T @ _lagrangian_gradient(pt, m_old, with_eq=False) - zg_old)
            self.pending = None
        if self.opt.hessian == "fd":
            H = fd_hessian(_FullSpace._gl_function(self, mult), pt.x, self.problem.hessian_blocks, clip=False)
            B = Z.T @ (H @ Z)
            vals, vecs = np.linalg.eigh(0.5 * (B + B.T))
            vals = np.maximum(vals, 1e-8 * max(1.0, np.max(np.abs(vals))))
            self.B = (vecs * vals) @ vecs.T
        else:
            self.B = self.bfgs.H[0]
        self.chol = np.linalg.cholesky(self.B)

    def _Binv(self, v):
        return np.linalg.solve(self.chol.T, np.linalg.solve(self.chol, v))

    def qp(self, Ai, ci, soft=None):
        pt, Z = self.pt, self.Z
        pY = np.zeros(self.problem.n)
        if pt.ce.size:
            pY[self.dep] = -self.lu.solve(pt.ce)
        g_r = Z.T @ pt.g
        p0 = -self._Binv(g_r)
        if Ai.shape[0]:
            Ar = np.asarray(Ai @ Z)
            cr = ci + Ai @ pY
            M = self._Binv(Ar.T)
            G = Ar @ M
            G = 0.5 * (G + G.T)
            if soft is not None:
                G[np.diag_indices_from(G)] += np.where(np.isfinite(soft), 1.0 / soft, 0.0)
            lam = _dual_active_set(G, -(Ar @ p0 + cr))
            if lam is None:
                return None
            pz = p0 - M @ lam
            self.Ar = Ar
        else:
            lam, pz = np.zeros(0), p0
        p = pY + Z @ pz
        rhs = pt.g[self.dep] + (Ai.T @ lam)[self.dep] if lam.size else pt.g[self.dep]
        nu = -self.lu.solve(rhs, trans="T")
        return p, nu, lam

    def set_active(self, Ai, act):
        self.act = act

    def correction(self, xt, act_gen):
        # Newton on the dependent variables, then a minimum-norm move of the
        # independent ones that restores the active inequalities
        d = np.zeros(self.problem.n)
        ce = self.problem.c_eq(xt)
        if ce.size:
            d[self.dep] = -self.lu.solve(ce)
        if self.act.size:
            ci = self.problem.c_ineq(xt + d)[act_gen] if act_gen.size else np.zeros(0)
            rhs = -np.concatenate([ci, np.zeros(self.act.size - act_gen.size)])
            dz = np.linalg.lstsq(self.Ar[self.act], rhs, rcond=None)[0]
            d += self.Z @ dz
        return d

    def update(self, pt, new, mult):
        if self.opt.hessian == "bfgs":
            s_z = new.x[self.indep] - pt.x[self.indep]
            self.pending = (s_z, self.Z.T @ _lagrangian_gradient(pt, mult, with_eq=False), mult)


def solve(problem: NlpProblem, x0, options: SolverOptions | None = None) -> SolverResult:
    """Minimise ``problem`` from ``x0`` (projected onto the bounds).

    With ``problem.independent`` set, steps are computed in the reduced space
    of those variables; otherwise in the full space.
    """
    opt = options or SolverOptions()
    n = problem.n
    lb, ub = problem.lb, problem.ub
    x = np.clip(np.asarray(x0, dtype=float), lb, ub)
    fin_lo, fin_up = np.flatnonzero(np.isfinite(lb)), np.flatnonzero(np.isfinite(ub))
    m_e, m_i = problem.c_eq(x).size, problem.c_ineq(x).size
    step = opt.fd_step

    def evaluate(x):
        return _Point(x, float(problem.f(x)), problem.gradient(x, step), problem.c_eq(x), problem.c_ineq(x),
                      problem.J_eq(x, step, m_e), problem.J_ineq(x, step, m_i))

    def merit(pt, mu):
        return pt.f + mu * pt.l1()

    def merit_x(x, mu):
        return float(problem.f(x)) + mu * (np.sum(np.abs(problem.c_eq(x)))
                                          + np.sum(np.maximum(problem.c_ineq(x), 0.0)))

    # bound rows: -x_j <= -lb_j  and  x_j <= ub_j
    B_rows = sp.vstack([sp.csr_matrix((-np.ones(fin_lo.size), (np.arange(fin_lo.size), fin_lo)),
                                      shape=(fin_lo.size, n)),
                        sp.csr_matrix((np.ones(fin_up.size), (np.arange(fin_up.size), fin_up)),
                                      shape=(fin_up.size, n))]).tocsr()

    def split(lam_all):
        lam_g = lam_all[:m_i]
        z = lam_all[m_i:]
        lower = np.zeros(n)
        upper = np.zeros(n)
        lower[fin_lo] = z[:fin_lo.size]
        upper[fin_up] = z[fin_lo.size:]
        return lam_g, lower, upper

    model = _ReducedSpace(problem, opt, m_e) if problem.independent is not None else _FullSpace(problem, opt)
    pt = evaluate(x)
    mu = opt.penalty_init
    history = []
    mult = Multipliers(np.zeros(m_e), np.zeros(m_i), np.zeros(n), np.zeros(n))
    status, message, kkt_val, resets = MAX_ITER, "iteration limit reached", np.inf, 0
    it = 0

    for it in range(opt.max_iter + 1):
        try:
            model.prepare(pt, mult)
        except (RuntimeError, np.linalg.LinAlgError) as exc:
            if isinstance(model, _FullSpace):
                raise
            log.warning("reduced-space step unavailable (%s); continuing in the full space", exc)
            model = _FullSpace(problem, opt)
            model.prepare(pt, mult)
        Ai = sp.vstack([pt.Ji, B_rows]).tocsr() if (m_i or B_rows.shape[0]) else sp.csr_matrix((0, n))
        ci = np.concatenate([pt.ci, -(pt.x[fin_lo] - lb[fin_lo]), pt.x[fin_up] - ub[fin_up]])
        sol = model.qp(Ai, ci)
        if sol is None and m_i:
            soft = np.full(Ai.shape[0], np.inf)
            soft[:m_i] = max(opt.elastic_penalty, mu)
            sol = model.qp(Ai, ci, soft)
        if sol is None:
            status, message = INFEASIBLE, "QP subproblem infeasible even in elastic mode"
            break
        p, nu, lam_all = sol
        lam_g, lower, upper = split(lam_all)
        qp_mult = Multipliers(nu, lam_g, lower, upper)

        viol = violation(problem, pt.x)
        kkt_val = kkt_residual(problem, pt.x, qp_mult, step)
        if viol <= opt.tol_constraint and kkt_val <= opt.tol_kkt:
            mult = qp_mult
            status = CONVERGED
            break
        if it == opt.max_iter:
            mult = qp_mult
            break

        mmax = max(np.max(np.abs(nu), initial=0.0), np.max(lam_g, initial=0.0))
        if mu < 1.1 * mmax:
            mu = opt.penalty_factor * mmax
        lin_e = pt.ce + pt.Je @ p if m_e else np.zeros(0)
        lin_i = pt.ci + pt.Ji @ p if m_i else np.zeros(0)
        l1_lin = np.sum(np.abs(lin_e)) + np.sum(np.maximum(lin_i, 0.0))
        D = float(pt.g @ p + mu * (l1_lin - pt.l1()))
        phi0 = merit(pt, mu)

        # trial points are corrected back towards c_E = 0 with the active
        # inequalities and bounds held at zero (frozen Jacobians)
        act_gen = np.flatnonzero(lam_g > 0)
        act = np.concatenate([act_gen, m_i + np.flatnonzero(lam_all[m_i:] > 0)])
        model.set_active(Ai, act)

        def residual(xt):
            r = np.sum(np.abs(problem.c_eq(xt)))
            if act_gen.size:
                r += np.sum(np.maximum(problem.c_ineq(xt)[act_gen], 0.0))
            return r

        def trial(alpha):
            # the uncorrected point stays a candidate: for short steps the
            # correction does not shrink with alpha and may lose descent
            xt = np.clip(pt.x + alpha * p, lb, ub)
            best = (merit_x(xt, mu), xt)
            if opt.soc_steps and (m_e or act_gen.size):
                r_t = residual(xt)
                for _ in range(opt.soc_steps):
                    if r_t <= 1e-3 * opt.tol_constraint:
                        break
                    xc = np.clip(xt + model.correction(xt, act_gen), lb, ub)
                    r_c = residual(xc)
                    if not r_c < 0.5 * r_t:
                        break
                    xt, r_t = xc, r_c
                    phi_c = merit_x(xt, mu)
                    if phi_c < best[0]:
                        best = (phi_c, xt)
            return best[1], best[0]

        x_new, alpha = None, 1.0
        # merit values are only resolved to a few ulps; near the solution the
        # predicted decrease falls below that and must not block the step
        noise = 10.0 * np.finfo(float).eps * max(1.0, abs(phi0))
        pinf = np.max(np.abs(p), initial=0.0)
        if pinf <= opt.tol_step * (1.0 + np.max(np.abs(pt.x))):
            x_new = np.clip(pt.x + p, lb, ub)
        else:
            xt, phi = trial(alpha)
            while True:
                if phi <= phi0 + opt.armijo * alpha * D + noise:
                    x_new = xt
                    break
                if alpha <= opt.min_alpha:
                    break
                denom = 2.0 * (phi - phi0 - D * alpha)
                a_new = -D * alpha ** 2 / denom if denom > 0 else 0.5 * alpha
                alpha = min(0.5 * alpha, max(0.1 * alpha, a_new))
                xt, phi = trial(alpha)
        if x_new is None:
            if resets == 0:
                resets += 1
                model.reset()
                log.info("line search failed at iteration %d; resetting Hessian", it)
                continue
            mult = qp_mult
            status, message = LINE_SEARCH_FAILURE, f"no acceptable step (D = {D:.3e})"
            break
        resets = 0
        new = evaluate(x_new)
        history.append({"iteration": it, "f": pt.f, "violation": viol, "kkt": kkt_val, "penalty": mu,
                        "alpha": alpha, "merit_before": phi0, "merit_after": merit(new, mu),
                        "step": float(np.max(np.abs(x_new - pt.x), initial=0.0))})
        if opt.callback is not None:
            opt.callback(history[-1])
        log.debug("it %3d f %.8e viol %.2e kkt %.2e alpha %.2e mu %.2e", it, pt.f, viol, kkt_val, alpha, mu)
        model.update(pt, new, qp_mult)
        pt, mult = new, qp_mult

    return SolverResult(x=pt.x, fun=pt.f, violation=violation(problem, pt.x), kkt=float(kkt_val),
                        iterations=it, status=status, multipliers=mult, history=history,
                        message=message)
