"""Legendre-Gauss-Radau nodes, quadrature weights, barycentric interpolation
and the rectangular collocation differentiation matrix.

The grid for ``n_cp`` collocation points consists of the ``n_cp + 1`` roots of
``P_{n_cp+1} + P_{n_cp}`` on ``[-1, 1)``.  The first node is -1; it carries the
interval's initial value and is not collocated, so the differentiation matrix
has rows for nodes ``1..n_cp`` only.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np


class SpectralError(RuntimeError):
    pass


def legendre_eval(k: int, theta):
    """Value and first derivative of the Legendre polynomial ``P_k`` with
    ``P_k(1) = 1``.

    Uses Bonnet's three-term recurrence and ``P'_{j+1} = P'_{j-1} + (2j+1) P_j``,
    which stays finite at the endpoints.
    """
    if k < 0:
        raise ValueError("degree must be >= 0")
    theta = np.asarray(theta, dtype=float)
    p_prev, p = np.ones_like(theta), theta.copy()
    dp_prev, dp = np.zeros_like(theta), np.ones_like(theta)
    if k == 0:
        return p_prev, dp_prev
    for j in range(1, k):
        p_prev, p = p, ((2 * j + 1) * theta * p - j * p_prev) / (j + 1)
        dp_prev, dp = dp, dp_prev + (2 * j + 1) * p_prev
    return p, dp


def _radau_poly(n_cp, theta):
    """``g = P_{n+1} + P_n`` and ``g'``, plus ``P_n`` (used by the weights)."""
    p1, dp1 = legendre_eval(n_cp + 1, theta)
    p0, dp0 = legendre_eval(n_cp, theta)
    return p1 + p0, dp1 + dp0, p0


def _residual_tol(n_cp):
    # |g'| grows like n^2 near the ends, so the attainable residual does too
    return 1e-13 * max(1.0, (n_cp + 1) ** 2 / 16.0)


def _bisect_roots(n_cp):
    grid = -np.cos(np.linspace(0.0, np.pi, 40 * (n_cp + 2)))
    grid[0] = -1.0
    g = _radau_poly(n_cp, grid)[0]
    roots = [-1.0]
    for a, b, ga, gb in zip(grid[1:-1], grid[2:], g[1:-1], g[2:]):
        if ga == 0.0:
            roots.append(a)
            continue
        if ga * gb > 0:
            continue
        for _ in range(200):
            m = 0.5 * (a + b)
            gm = _radau_poly(n_cp, m)[0]
            if ga * gm <= 0:
                b = m
            else:
                a, ga = m, gm
            if b - a < 1e-16:
                break
        roots.append(0.5 * (a + b))
    return np.array(sorted(set(roots)))


def lgr_points(n_cp: int) -> np.ndarray:
    """The ``n_cp + 1`` LGR nodes in ascending order with ``points[0] == -1``."""
    if n_cp < 1:
        raise ValueError("n_cp must be >= 1")
    n = n_cp + 1
    # Chebyshev-Gauss-Radau initial guesses
    x = -np.cos(2.0 * np.pi * np.arange(n) / (2 * n - 1))
    for _ in range(100):
        g, dg, _ = _radau_poly(n_cp, x[1:])
        step = g / dg
        x[1:] -= step
        if np.max(np.abs(step)) < 1e-15:
            break
    x[0] = -1.0
    x = np.sort(x)
    ok = (np.all(np.diff(x) > 0) and x[-1] < 1.0
          and np.all(np.abs(_radau_poly(n_cp, x)[0]) < _residual_tol(n_cp)))
    if not ok:
        x = _bisect_roots(n_cp)
    residual = np.abs(_radau_poly(n_cp, x)[0])
    if x.size != n or np.any(residual >= _residual_tol(n_cp)):
        raise SpectralError(f"LGR root-finding failed for n_cp={n_cp}: max residual {residual.max():.2e}")
    x[0] = -1.0
    return x


def _weights_closed_form(points):
    n_cp = points.size - 1
    p_n = legendre_eval(n_cp, points)[0]
    w = (1.0 - points) / ((n_cp + 1) ** 2 * p_n ** 2)
    w[0] = 2.0 / (n_cp + 1) ** 2
    return w


def _weights_moments(points):
    # Legendre-basis moment equations: sum_k w_k P_j(theta_k) = 2 delta_j0
    n = points.size
    V = np.array([legendre_eval(j, points)[0] for j in range(n)])
    rhs = np.zeros(n)
    rhs[0] = 2.0
    return np.linalg.solve(V, rhs)


def lgr_weights(points) -> np.ndarray:
    """Quadrature weights exact for polynomials up to degree ``2 n_cp``.

    The closed form is cross-checked against the moment system and the rule is
    verified on the highest-degree monomial before returning.
    """
    points = np.asarray(points, dtype=float)
    n_cp = points.size - 1
    w = _weights_closed_form(points)
    if n_cp <= 40:
        w_mom = _weights_moments(points)
        if np.max(np.abs(w - w_mom)) > 1e-11:
            raise SpectralError("closed-form and moment LGR weights disagree")
    deg = 2 * n_cp
    exact = 2.0 / (deg + 1)
    if abs(w @ points ** deg - exact) > 1e-12 * max(1.0, n_cp):
        raise SpectralError("LGR quadrature failed its exactness self-check")
    return w


def barycentric_weights(points) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    diff = points[:, None] - points[None, :]
    np.fill_diagonal(diff, 1.0)
    w = 1.0 / np.prod(diff, axis=1)
    return w / np.max(np.abs(w))


def barycentric_derivative_matrix(points) -> np.ndarray:
    """Square matrix ``D[k, l] = L_l'(points[k])`` from barycentric weights."""
    points = np.asarray(points, dtype=float)
    b = barycentric_weights(points)
    diff = points[:, None] - points[None, :]
    np.fill_diagonal(diff, 1.0)
    D = (b[None, :] / b[:, None]) / diff
    np.fill_diagonal(D, 0.0)
    np.fill_diagonal(D, -D.sum(axis=1))
    return D


def radau_derivative_matrix(points) -> np.ndarray:
    """Square derivative matrix from the closed-form LGR cardinal functions.

    Off-diagonal entries are ``g'(t_k) / ((t_k - t_j) g'(t_j))`` with
    ``g = P_{n+1} + P_n``.  On the diagonal ``L_k'(t_k) = g''(t_k) / (2 g'(t_k))``,
    which with the Legendre equation reduces to
    ``t_k / (1 - t_k^2) + (n + 1) P_n(t_k) / ((1 - t_k^2) g'(t_k))`` for ``k > 0``
    and ``-n (n + 2) / 4`` at ``t_0 = -1``.
    """
    points = np.asarray(points, dtype=float)
    n_cp = points.size - 1
    _, dg, p_n = _radau_poly(n_cp, points)
    diff = points[:, None] - points[None, :]
    np.fill_diagonal(diff, 1.0)
    D = dg[:, None] / (diff * dg[None, :])
    t = points[1:]
    one_m = 1.0 - t ** 2
    diag = t / one_m + (n_cp + 1) * p_n[1:] / (one_m * dg[1:])
    np.fill_diagonal(D, np.concatenate([[-n_cp * (n_cp + 2) / 4.0], diag]))
    return D


def differentiation_matrix(points, *, check: bool = True) -> np.ndarray:
    """Rectangular ``n_cp x (n_cp + 1)`` collocation differentiation matrix."""
    points = np.asarray(points, dtype=float)
    D = barycentric_derivative_matrix(points)
    if check:
        D_closed = radau_derivative_matrix(points)
        err = np.max(np.abs(D - D_closed)) / max(1.0, np.max(np.abs(D)))
        if err > 1e-9:
            raise SpectralError(f"closed-form and barycentric derivative matrices differ by {err:.2e}")
    return D[1:, :]


def interpolate(points, values, t, bary=None):
    """Evaluate the degree-``len(points)-1`` interpolant at ``t`` (second
    barycentric form).  ``values`` may carry trailing columns."""
    points = np.asarray(points, dtype=float)
    values = np.asarray(values, dtype=float)
    t = np.asarray(t, dtype=float)
    b = barycentric_weights(points) if bary is None else bary
    scalar = t.ndim == 0
    t = np.atleast_1d(t)
    diff = t[:, None] - points[None, :]
    exact = diff == 0.0
    diff[exact] = 1.0
    c = b[None, :] / diff
    out = np.tensordot(c, values, axes=(1, 0)) / c.sum(axis=1).reshape((-1,) + (1,) * (values.ndim - 1))
    hit_rows, hit_cols = np.nonzero(exact)
    out[hit_rows] = values[hit_cols]
    return out[0] if scalar else out


@dataclass(frozen=True)
class LgrScheme:
    n_cp: int
    points: np.ndarray
    weights: np.ndarray
    diff_matrix: np.ndarray
    bary_weights: np.ndarray

    def interpolate(self, values, theta):
        return interpolate(self.points, values, theta, self.bary_weights)


@functools.lru_cache(maxsize=None)
def lgr_scheme(n_cp: int) -> LgrScheme:
    points = lgr_points(n_cp)
    arrays = (points, lgr_weights(points), differentiation_matrix(points), barycentric_weights(points))
    for a in arrays:
        a.setflags(write=False)
    return LgrScheme(n_cp, *arrays)
