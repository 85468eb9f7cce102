"""Risk-structured HIV transmission model with PrEP and TaP enrollment controls.

All evaluators are vectorised over leading axes: a state argument may have
shape ``(9,)`` or ``(..., 9)`` and a control argument ``(2,)`` or ``(..., 2)``.

State ordering (fixed everywhere in the package)::

    0 S_H   1 S_L   2 I_AH  3 I_AL  4 I_CH  5 I_CL  6 T_H  7 T_L  8 P

Control ordering: ``(u_P, u_T)``.  Time unit is one month.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

STATE_NAMES = ("S_H", "S_L", "I_AH", "I_AL", "I_CH", "I_CL", "T_H", "T_L", "P")
CONTROL_NAMES = ("u_P", "u_T")
N_STATE = len(STATE_NAMES)
N_CONTROL = len(CONTROL_NAMES)

S_H, S_L, I_AH, I_AL, I_CH, I_CL, T_H, T_L, P = range(N_STATE)
U_P, U_T = range(N_CONTROL)

# membership of each compartment in the high/low risk totals
HIGH = np.array([1, 0, 1, 0, 1, 0, 1, 0, 1], dtype=float)
LOW = 1.0 - HIGH


@dataclass(frozen=True)
class ModelParams:
    """Epidemiological and treatment rates (per month unless noted).

    Defaults are the outbreak scenario for a population of about 100,000
    at-risk MSM: static risk, random mixing (``pi = 0``), high-risk contact
    rate ten times the low-risk one.  ``delta_A`` and ``delta_C`` are the
    values annotated on the model flow diagram.
    """

    alpha_H: float = 28.0
    alpha_L: float = 250.0
    mu: float = 1.0 / 360.0
    delta_A: float = 0.17
    delta_C: float = 8.5e-3
    rho_H: float = 0.0
    rho_L: float = 0.0
    x: float = 0.0
    y: float = 0.0
    baseline_tap: float = 0.00148
    lambda_H: float = 40.9
    lambda_L: float = 4.09
    beta_A: float = 0.015
    beta_C: float = 0.001
    pi: float = 0.0
    r_b: float = 4.0

    RATES = ("alpha_H", "alpha_L", "mu", "delta_A", "delta_C", "rho_H", "rho_L",
             "x", "y", "baseline_tap", "lambda_H", "lambda_L")
    PROBABILITIES = ("beta_A", "beta_C", "pi")

    def validate(self) -> "ModelParams":
        for name in self.RATES:
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"rate {name} must be finite and >= 0, got {value}")
        for name in self.PROBABILITIES:
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"probability {name} must lie in [0, 1], got {value}")
        if not self.r_b > 0:
            raise ValueError(f"odds ratio r_b must be > 0, got {self.r_b}")
        return self

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class CostParams:
    """Budget coefficients: monthly treatment cost per patient and the cost of
    sampling one unit of population for enrollment.  ``discount`` is an
    optional rate applied to the incidence cost only."""

    K_T_treat: float = 1299.0
    K_P_treat: float = 776.0
    K_T_enroll: float = 266.0
    K_P_enroll: float = 213.0
    discount: float = 0.0

    def validate(self) -> "CostParams":
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {value}")
        return self


@dataclass(frozen=True)
class MixingRates:
    theta: np.ndarray
    eta_H: np.ndarray
    eta_L: np.ndarray
    sigma: np.ndarray
    tau_H: np.ndarray
    tau_L: np.ndarray
    psi_H: np.ndarray
    psi_L: np.ndarray
    phi_H: np.ndarray
    phi_L: np.ndarray


@dataclass(frozen=True)
class EnrollmentFractions:
    zeta_P: np.ndarray
    zeta_TH: np.ndarray
    zeta_TL: np.ndarray


def state_vector(**compartments: float) -> np.ndarray:
    """Build a state array from keyword compartments; missing ones are 0."""
    unknown = set(compartments) - set(STATE_NAMES)
    if unknown:
        raise KeyError(f"unknown compartments: {sorted(unknown)}")
    return np.array([float(compartments.get(name, 0.0)) for name in STATE_NAMES])


def totals(X):
    """Return ``(N, N_H, N_L)``; P counts towards the high-risk total."""
    X = np.asarray(X, dtype=float)
    N_H = X @ HIGH
    N_L = X @ LOW
    return N_H + N_L, N_H, N_L


def _ratio(num, den):
    # 0/0 -> 0 on the closed orthant
    den = np.asarray(den, dtype=float)
    safe = np.where(den > 0, den, 1.0)
    return np.where(den > 0, num / safe, 0.0)


def mixing_rates(X, params: ModelParams) -> MixingRates:
    X = np.asarray(X, dtype=float)
    p = params
    _, N_H, N_L = totals(X)
    theta = p.lambda_H * N_H + p.lambda_L * N_L
    eta_H = _ratio(p.lambda_H * N_H, theta)
    eta_L = _ratio(p.lambda_L * N_L, theta)
    infectious = (p.beta_A * (p.lambda_H * X[..., I_AH] + p.lambda_L * X[..., I_AL])
                  + p.beta_C * (p.lambda_H * X[..., I_CH] + p.lambda_L * X[..., I_CL]))
    sigma = _ratio(infectious, theta)
    tau_H = (1 - p.pi) * p.lambda_H * sigma
    tau_L = (1 - p.pi) * p.lambda_L * sigma
    psi_H = p.pi * p.lambda_H * _ratio(p.beta_A * X[..., I_AH] + p.beta_C * X[..., I_CH], N_H)
    psi_L = p.pi * p.lambda_L * _ratio(p.beta_A * X[..., I_AL] + p.beta_C * X[..., I_CL], N_L)
    return MixingRates(theta, eta_H, eta_L, sigma, tau_H, tau_L, psi_H, psi_L,
                       psi_H + tau_H, psi_L + tau_L)


def mixing_jacobian(X, params: ModelParams):
    """Partial derivatives of ``(phi_H, phi_L)`` with respect to the state.

    Returns two arrays of shape ``(..., 9)``.  On the degenerate faces where a
    denominator vanishes the derivative of the corresponding term is taken as 0.
    """
    X = np.asarray(X, dtype=float)
    p = params
    _, N_H, N_L = totals(X)
    theta = p.lambda_H * N_H + p.lambda_L * N_L
    d_theta = p.lambda_H * HIGH + p.lambda_L * LOW
    d_inf = np.zeros(N_STATE)
    d_inf[[I_AH, I_AL, I_CH, I_CL]] = [p.beta_A * p.lambda_H, p.beta_A * p.lambda_L,
                                       p.beta_C * p.lambda_H, p.beta_C * p.lambda_L]
    sigma = mixing_rates(X, p).sigma
    inv_theta = _ratio(1.0, theta)[..., None]
    d_sigma = (d_inf - sigma[..., None] * d_theta) * inv_theta

    def psi_grad(lam, I_A, I_C, N_g, member):
        load = p.beta_A * X[..., I_A] + p.beta_C * X[..., I_C]
        d_load = np.zeros(N_STATE)
        d_load[[I_A, I_C]] = [p.beta_A, p.beta_C]
        inv_N = _ratio(1.0, N_g)[..., None]
        return p.pi * lam * (d_load - (load * _ratio(1.0, N_g))[..., None] * member) * inv_N

    d_phi_H = (1 - p.pi) * p.lambda_H * d_sigma + psi_grad(p.lambda_H, I_AH, I_CH, N_H, HIGH)
    d_phi_L = (1 - p.pi) * p.lambda_L * d_sigma + psi_grad(p.lambda_L, I_AL, I_CL, N_L, LOW)
    return d_phi_H, d_phi_L


def enrollment_fractions(X, params: ModelParams) -> EnrollmentFractions:
    X = np.asarray(X, dtype=float)
    _, N_H, N_L = totals(X)
    Z = params.r_b * N_H + N_L
    return EnrollmentFractions(
        zeta_P=_ratio(params.r_b * X[..., S_H], Z),
        zeta_TH=_ratio(params.r_b * X[..., I_CH], Z),
        zeta_TL=_ratio(X[..., I_CL], Z),
    )


def _enrollment_flows(X, params):
    """Absolute enrollment rates per unit control, ``zeta * N``, and their
    state gradients."""
    N, N_H, N_L = totals(X)
    rb = params.r_b
    Z = rb * N_H + N_L
    inv_Z = _ratio(1.0, Z)
    dZ = rb * HIGH + LOW
    flows = {}
    for key, idx, coef in (("P", S_H, rb), ("TH", I_CH, rb), ("TL", I_CL, 1.0)):
        value = coef * X[..., idx] * N * inv_Z
        # d(c x_idx N / Z) = c (e_idx N + x_idx) / Z - c x_idx N dZ / Z^2
        grad = (coef * X[..., idx] * inv_Z)[..., None] * np.ones(N_STATE)
        grad = grad - (value * inv_Z)[..., None] * dZ
        grad[..., idx] += coef * N * inv_Z
        flows[key] = (value, grad)
    return flows


def rhs(t, X, u, params: ModelParams):
    """Time derivative of the state.  ``t`` is unused (autonomous model) and
    kept for integrator call signatures."""
    X = np.asarray(X, dtype=float)
    u = np.asarray(u, dtype=float)
    p = params
    mix = mixing_rates(X, p)
    flows = _enrollment_flows(X, p)
    uP, uT = u[..., U_P], u[..., U_T]
    to_prep = uP * flows["P"][0]
    to_tap_H = uT * flows["TH"][0]
    to_tap_L = uT * flows["TL"][0]
    sH, sL, iAH, iAL, iCH, iCL, tH, tL, pr = np.moveaxis(X, -1, 0)
    d = np.empty(np.broadcast_shapes(X.shape, u.shape[:-1] + (N_STATE,)))
    d[..., S_H] = p.alpha_H - (mix.phi_H + p.rho_H + p.mu) * sH + p.rho_L * sL + p.x * pr - to_prep
    d[..., S_L] = p.alpha_L - (mix.phi_L + p.rho_L + p.mu) * sL + p.rho_H * (sH + pr)
    d[..., I_AH] = mix.phi_H * sH - (p.rho_H + p.mu + p.delta_A) * iAH + p.rho_L * iAL
    d[..., I_AL] = mix.phi_L * sL - (p.rho_L + p.mu + p.delta_A) * iAL + p.rho_H * iAH
    d[..., I_CH] = (p.delta_A * iAH - (p.rho_H + p.mu + p.delta_C + p.baseline_tap) * iCH
                    + p.rho_L * iCL + p.y * tH - to_tap_H)
    d[..., I_CL] = (p.delta_A * iAL - (p.rho_L + p.mu + p.delta_C + p.baseline_tap) * iCL
                    + p.rho_H * iCH + p.y * tL - to_tap_L)
    d[..., T_H] = -(p.y + p.rho_H + p.mu) * tH + p.baseline_tap * iCH + p.rho_L * tL + to_tap_H
    d[..., T_L] = -(p.y + p.rho_L + p.mu) * tL + p.baseline_tap * iCL + p.rho_H * tH + to_tap_L
    d[..., P] = -(p.x + p.rho_H + p.mu) * pr + to_prep
    return d


def rhs_jacobian(X, u, params: ModelParams):
    """Analytic Jacobians of :func:`rhs`.

    Returns ``(dF_dX, dF_du)`` with shapes ``(..., 9, 9)`` and ``(..., 9, 2)``;
    row index is the derivative component, column the differentiated variable.
    """
    X = np.asarray(X, dtype=float)
    u = np.asarray(u, dtype=float)
    p = params
    shape = np.broadcast_shapes(X.shape[:-1], u.shape[:-1])
    X = np.broadcast_to(X, shape + (N_STATE,))
    u = np.broadcast_to(u, shape + (N_CONTROL,))
    mix = mixing_rates(X, p)
    d_phi_H, d_phi_L = mixing_jacobian(X, p)
    flows = _enrollment_flows(X, p)
    uP, uT = u[..., U_P, None], u[..., U_T, None]

    J = np.zeros(shape + (N_STATE, N_STATE))
    # linear part
    lin = np.zeros((N_STATE, N_STATE))
    lin[S_H, [S_H, S_L, P]] = [-(p.rho_H + p.mu), p.rho_L, p.x]
    lin[S_L, [S_L, S_H, P]] = [-(p.rho_L + p.mu), p.rho_H, p.rho_H]
    lin[I_AH, [I_AH, I_AL]] = [-(p.rho_H + p.mu + p.delta_A), p.rho_L]
    lin[I_AL, [I_AL, I_AH]] = [-(p.rho_L + p.mu + p.delta_A), p.rho_H]
    lin[I_CH, [I_AH, I_CH, I_CL, T_H]] = [p.delta_A, -(p.rho_H + p.mu + p.delta_C + p.baseline_tap),
                                         p.rho_L, p.y]
    lin[I_CL, [I_AL, I_CL, I_CH, T_L]] = [p.delta_A, -(p.rho_L + p.mu + p.delta_C + p.baseline_tap),
                                         p.rho_H, p.y]
    lin[T_H, [T_H, I_CH, T_L]] = [-(p.y + p.rho_H + p.mu), p.baseline_tap, p.rho_L]
    lin[T_L, [T_L, I_CL, T_H]] = [-(p.y + p.rho_L + p.mu), p.baseline_tap, p.rho_H]
    lin[P, P] = -(p.x + p.rho_H + p.mu)
    J += lin

    # infection terms phi_H S_H and phi_L S_L
    inf_H = d_phi_H * X[..., S_H, None]
    inf_H[..., S_H] += mix.phi_H
    inf_L = d_phi_L * X[..., S_L, None]
    inf_L[..., S_L] += mix.phi_L
    J[..., S_H, :] -= inf_H
    J[..., I_AH, :] += inf_H
    J[..., S_L, :] -= inf_L
    J[..., I_AL, :] += inf_L

    # enrollment terms
    g_P = uP * flows["P"][1]
    g_TH = uT * flows["TH"][1]
    g_TL = uT * flows["TL"][1]
    J[..., S_H, :] -= g_P
    J[..., P, :] += g_P
    J[..., I_CH, :] -= g_TH
    J[..., T_H, :] += g_TH
    J[..., I_CL, :] -= g_TL
    J[..., T_L, :] += g_TL

    Ju = np.zeros(shape + (N_STATE, N_CONTROL))
    Ju[..., S_H, U_P] = -flows["P"][0]
    Ju[..., P, U_P] = flows["P"][0]
    Ju[..., I_CH, U_T] = -flows["TH"][0]
    Ju[..., T_H, U_T] = flows["TH"][0]
    Ju[..., I_CL, U_T] = -flows["TL"][0]
    Ju[..., T_L, U_T] = flows["TL"][0]
    return J, Ju


def population_balance(X, params: ModelParams):
    """Expected sum of all derivatives: inflow minus background and AIDS removal."""
    X = np.asarray(X, dtype=float)
    N = X.sum(axis=-1)
    return params.alpha_H + params.alpha_L - params.mu * N - params.delta_C * (X[..., I_CH] + X[..., I_CL])


def incidence_cost(X, params: ModelParams):
    """New infections per month, ``S_H phi_H + S_L phi_L``."""
    X = np.asarray(X, dtype=float)
    mix = mixing_rates(X, params)
    return X[..., S_H] * mix.phi_H + X[..., S_L] * mix.phi_L


def incidence_cost_gradient(X, params: ModelParams):
    X = np.asarray(X, dtype=float)
    mix = mixing_rates(X, params)
    d_phi_H, d_phi_L = mixing_jacobian(X, params)
    grad = X[..., S_H, None] * d_phi_H + X[..., S_L, None] * d_phi_L
    grad[..., S_H] += mix.phi_H
    grad[..., S_L] += mix.phi_L
    return grad


def death_rate(X, params: ModelParams):
    X = np.asarray(X, dtype=float)
    return params.delta_C * (X[..., I_CH] + X[..., I_CL])


def budget_rate(X, u, costs: CostParams):
    """Monthly spend on treatment plus enrollment sampling."""
    X = np.asarray(X, dtype=float)
    u = np.asarray(u, dtype=float)
    N = X.sum(axis=-1)
    return (costs.K_T_treat * (X[..., T_H] + X[..., T_L]) + costs.K_P_treat * X[..., P]
            + costs.K_T_enroll * N * u[..., U_T] + costs.K_P_enroll * N * u[..., U_P])


def budget_rate_gradient(X, u, costs: CostParams):
    """Gradients of :func:`budget_rate` with respect to state and control."""
    X = np.asarray(X, dtype=float)
    u = np.asarray(u, dtype=float)
    shape = np.broadcast_shapes(X.shape[:-1], u.shape[:-1])
    enroll = costs.K_T_enroll * u[..., U_T] + costs.K_P_enroll * u[..., U_P]
    gx = np.broadcast_to(np.asarray(enroll)[..., None], shape + (N_STATE,)).copy()
    gx[..., [T_H, T_L]] += costs.K_T_treat
    gx[..., P] += costs.K_P_treat
    N = np.broadcast_to(X.sum(axis=-1), shape)
    gu = np.stack([costs.K_P_enroll * N, costs.K_T_enroll * N], axis=-1)
    return gx, gu


@dataclass
class NonnegativityReport:
    samples: int
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def check_essential_nonnegativity(params: ModelParams, samples: int = 10_000, *,
                                  seed: int = 0, scale: float = 1e5,
                                  control_scale: float = 0.1) -> NonnegativityReport:
    """Randomised check that the vector field points into the orthant on each
    face ``X_i = 0``.

    States are drawn log-uniformly over eight decades below ``scale`` (and
    occasionally set to exact zeros) so that both typical and near-degenerate
    configurations are visited.  Violations are collected, not raised.
    """
    rng = np.random.default_rng(seed)
    X = scale * 10.0 ** rng.uniform(-8, 0, size=(samples, N_STATE))
    X[rng.random((samples, N_STATE)) < 0.1] = 0.0
    u = control_scale * 10.0 ** rng.uniform(-6, 0, size=(samples, N_CONTROL))
    u[rng.random((samples, N_CONTROL)) < 0.1] = 0.0
    report = NonnegativityReport(samples=samples)
    for i in range(N_STATE):
        Xi = X.copy()
        Xi[:, i] = 0.0
        d = rhs(0.0, Xi, u, params)[:, i]
        # tolerate round-off relative to the magnitude of the face's flows
        bad = np.flatnonzero(d < -1e-12 * (1.0 + np.abs(Xi).sum(axis=1)))
        for k in bad:
            report.violations.append((STATE_NAMES[i], Xi[k].copy(), u[k].copy(), float(d[k])))
    return report
