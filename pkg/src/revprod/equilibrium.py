"""Monopolistic-competition and marginal-cost-pricing equilibria.

Firms have Cobb-Douglas technology and face CoPaTh-HSA demand. The material
price is normalized to one, so material cost equals ``exp(chi(y))`` with
``chi(y) = (y - theta_k k - theta_l l - omega) / theta_m``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp, softmax

from .demand import DemandShockVector, HSADemandParams, log_share, markup, solve_delta_q, utility_change
from .numerics import NumericsError, SolverReport, brent_root, newton_system

__all__ = [
    "EquilibriumError",
    "ProductionParams",
    "FirmTech",
    "EquilibriumSolution",
    "WelfareReport",
    "mce_residual",
    "mce_jacobian",
    "mcpe_residual",
    "mcpe_jacobian",
    "mce_initial_guess",
    "solve_mce",
    "solve_mcpe",
    "compensating_variation",
    "profit_change",
    "welfare_report",
    "write_welfare_csv",
]

NEWTON_TOL = 1e-10


class EquilibriumError(RuntimeError):
    def __init__(self, message, report: Optional[SolverReport] = None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class ProductionParams:
    theta_m: float = 0.4
    theta_k: float = 0.3
    theta_l: float = 0.3
    rho_omega: float = 0.8
    sigma_eta: float = 0.05
    rts: float = 1.0

    def __post_init__(self):
        if min(self.theta_m, self.theta_k, self.theta_l) <= 0:
            raise ValueError("output elasticities must be positive")
        if not 0 <= self.rho_omega < 1:
            raise ValueError("rho_omega must lie in [0, 1)")
        if self.sigma_eta < 0 or self.rts <= 0:
            raise ValueError("sigma_eta must be >= 0 and rts > 0")
        if abs(self.theta_m + self.theta_k + self.theta_l - self.rts) > 1e-12:
            raise ValueError("elasticities must add up to rts")

    @classmethod
    def with_rts(cls, rts: float, shares=(0.4, 0.3, 0.3), **kw) -> "ProductionParams":
        """Elasticities proportional to ``shares`` that add up to ``rts``."""
        tot = sum(shares)
        th = [rts * s / tot for s in shares]
        th[0] = rts - th[1] - th[2]
        return cls(theta_m=th[0], theta_k=th[1], theta_l=th[2], rts=rts, **kw)

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.theta_m, self.theta_k, self.theta_l])


@dataclass(frozen=True)
class FirmTech:
    """Per-firm technology state, stored as vectors over firms."""

    k: np.ndarray
    l: np.ndarray
    omega: np.ndarray
    xi: np.ndarray

    @classmethod
    def build(cls, k, l, omega, theta: ProductionParams) -> "FirmTech":
        k, l, omega = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (k, l, omega))
        xi = math.log(theta.theta_m) + (theta.theta_k * k + theta.theta_l * l + omega) / theta.theta_m
        return cls(k=k, l=l, omega=omega, xi=xi)

    def __len__(self):
        return self.k.size

    def chi(self, y, theta: ProductionParams):
        """Log material input needed to produce log output ``y``."""
        return (np.asarray(y) - theta.theta_k * self.k - theta.theta_l * self.l - self.omega) / theta.theta_m


@dataclass
class EquilibriumSolution:
    y: np.ndarray
    index: float
    kind: str  # "mce" (index is gamma_new) or "mcpe" (index is delta_q)
    report: SolverReport
    markups: Optional[np.ndarray] = None
    share_sum: float = float("nan")
    meta: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# residual systems
# --------------------------------------------------------------------------


def _log_e_plus_eps(a, eps):
    """``ln(exp(a) + eps)`` and the weight ``exp(a) / (exp(a) + eps)``."""
    with np.errstate(divide="ignore"):
        lse = np.logaddexp(a, np.log(eps))
    w = np.exp(a - lse)
    return lse, w


def mce_residual(x, tech: FirmTech, eps, p: HSADemandParams, theta: ProductionParams):
    """Stacked MCE conditions; unknowns ``x = (y_1..y_N, gamma)``, index q = 0."""
    y, gamma = x[:-1], x[-1]
    b, tm = p.beta, theta.theta_m
    a = -b * y + gamma
    lse, _ = _log_e_plus_eps(a, eps)
    foc = p.Phi + p.delta - b * y + gamma + tech.xi - y / tm + np.log1p(eps) / b - (1.0 + 1.0 / b) * lse
    s = p.delta - (lse - np.log1p(eps)) / b
    return np.append(foc, logsumexp(s))


def mce_jacobian(x, tech: FirmTech, eps, p: HSADemandParams, theta: ProductionParams):
    y, gamma = x[:-1], x[-1]
    b, tm = p.beta, theta.theta_m
    n = y.size
    lse, w = _log_e_plus_eps(-b * y + gamma, eps)
    s = p.delta - (lse - np.log1p(eps)) / b
    pi = softmax(s)
    J = np.zeros((n + 1, n + 1))
    J[np.arange(n), np.arange(n)] = -b - 1.0 / tm + (b + 1.0) * w
    J[:n, n] = 1.0 - (1.0 + 1.0 / b) * w
    J[n, :n] = pi * w
    J[n, n] = -np.sum(pi * w) / b
    return J


def mcpe_residual(x, tech: FirmTech, eps, p: HSADemandParams, theta: ProductionParams, Phi_c: float):
    """Stacked MCPE conditions; unknowns ``x = (y_1..y_N, delta_q)``, gamma fixed."""
    y, dq = x[:-1], x[-1]
    b = p.beta
    lse, _ = _log_e_plus_eps(-b * (y - dq) + p.gamma, eps)
    s = p.delta - (lse - np.log1p(eps)) / b
    foc = Phi_c + s + tech.xi - y / theta.theta_m
    return np.append(foc, logsumexp(s))


def mcpe_jacobian(x, tech: FirmTech, eps, p: HSADemandParams, theta: ProductionParams, Phi_c: float):
    y, dq = x[:-1], x[-1]
    b = p.beta
    n = y.size
    lse, w = _log_e_plus_eps(-b * (y - dq) + p.gamma, eps)
    s = p.delta - (lse - np.log1p(eps)) / b
    pi = softmax(s)
    J = np.zeros((n + 1, n + 1))
    J[np.arange(n), np.arange(n)] = w - 1.0 / theta.theta_m
    J[:n, n] = -w
    J[n, :n] = pi * w
    J[n, n] = -np.sum(pi * w)
    return J


# --------------------------------------------------------------------------
# solvers
# --------------------------------------------------------------------------


def _solve_gamma_for_shares(y, eps, p: HSADemandParams) -> float:
    """gamma making shares add up to one at fixed outputs (q = 0)."""

    def h(g):
        return float(logsumexp(log_share(y, eps, p.replace(gamma=g))))

    lo, hi = p.beta * float(np.min(y)) - 1.0, p.beta * float(np.max(y)) + 1.0
    for _ in range(60):
        h_lo, h_hi = h(lo), h(hi)
        if h_lo >= 0 >= h_hi:
            return brent_root(h, lo, hi, tol=1e-14)
        width = hi - lo
        if h_lo < 0:
            lo -= width
        if h_hi > 0:
            hi += width
    raise EquilibriumError("could not bracket gamma for the initial guess")


def mce_initial_guess(tech: FirmTech, eps, p: HSADemandParams, theta: ProductionParams):
    """CES-limit outputs with a common (median) demand shock, then matching gamma."""
    eps_bar = float(np.median(eps))
    rho = 1.0 / (1.0 + eps_bar)
    c = 1.0 / theta.theta_m - rho
    A = p.Phi + p.delta + math.log(rho) + tech.xi
    q = theta.theta_m * c / rho * float(logsumexp(p.delta + rho * A / c))
    y0 = (A - rho * q) / c
    return y0, _solve_gamma_for_shares(y0, eps, p)


def _newton_with_retry(residual, jacobian, x0, shift_idx):
    x, rep = newton_system(residual, jacobian, x0, tol=NEWTON_TOL, max_iter=100)
    if rep.converged:
        return x, rep, 0
    x1 = np.array(x0, dtype=float)
    x1[shift_idx] -= 0.1
    x, rep2 = newton_system(residual, jacobian, x1, tol=NEWTON_TOL, max_iter=100)
    if rep2.converged:
        return x, rep2, 1
    raise EquilibriumError(
        f"Newton failed after retry: {rep2.message} (residual {rep2.residual_norm:.3e})", rep2
    )


def solve_mce(tech: FirmTech, eps, p: HSADemandParams, theta: ProductionParams,
              y0=None) -> EquilibriumSolution:
    """Outputs and gamma of the MCE under the normalization q = 0.

    ``p.gamma`` is ignored; it is solved for.
    """
    eps = np.atleast_1d(np.asarray(eps, dtype=float))
    n = len(tech)
    if n < 1 or eps.size != n:
        raise EquilibriumError("need matching, non-empty firm and shock vectors")
    if np.any(eps < 0):
        raise EquilibriumError("demand shocks must be non-negative")
    if y0 is None:
        y_init, g_init = mce_initial_guess(tech, eps, p, theta)
    else:
        y_init = np.asarray(y0, dtype=float)
        g_init = _solve_gamma_for_shares(y_init, eps, p)
    x0 = np.append(y_init, g_init)
    x, rep, retries = _newton_with_retry(
        lambda v: mce_residual(v, tech, eps, p, theta),
        lambda v: mce_jacobian(v, tech, eps, p, theta),
        x0,
        slice(0, n),
    )
    y, gamma = x[:-1], float(x[-1])
    pg = p.replace(gamma=gamma)
    share_sum = float(np.sum(np.exp(log_share(y, eps, pg))))
    return EquilibriumSolution(
        y=y, index=gamma, kind="mce", report=rep, markups=markup(y, eps, pg),
        share_sum=share_sum, meta={"retries": retries},
    )


def solve_mcpe(tech: FirmTech, eps, p: HSADemandParams, theta: ProductionParams, Phi_c: float,
               y0=None) -> EquilibriumSolution:
    """Outputs and quantity-index change under marginal-cost pricing at income ``Phi_c``."""
    eps = np.atleast_1d(np.asarray(eps, dtype=float))
    n = len(tech)
    if n < 1 or eps.size != n:
        raise EquilibriumError("need matching, non-empty firm and shock vectors")
    if y0 is None:
        y0 = mce_initial_guess(tech, eps, p, theta)[0]
    y0 = np.asarray(y0, dtype=float)
    dq0 = solve_delta_q(y0, DemandShockVector(eps), p)
    x, rep, retries = _newton_with_retry(
        lambda v: mcpe_residual(v, tech, eps, p, theta, Phi_c),
        lambda v: mcpe_jacobian(v, tech, eps, p, theta, Phi_c),
        np.append(y0, dq0),
        slice(0, n),
    )
    y, dq = x[:-1], float(x[-1])
    share_sum = float(np.sum(np.exp(log_share(y - dq, eps, p))))
    return EquilibriumSolution(
        y=y, index=dq, kind="mcpe", report=rep, share_sum=share_sum,
        meta={"retries": retries, "Phi_c": float(Phi_c)},
    )


# --------------------------------------------------------------------------
# welfare
# --------------------------------------------------------------------------


def _mce_params(mce: EquilibriumSolution, p: HSADemandParams) -> HSADemandParams:
    if mce.kind != "mce":
        raise ValueError("expected an MCE solution")
    return p.replace(gamma=mce.index)


def compensating_variation(mce: EquilibriumSolution, tech: FirmTech, eps, p: HSADemandParams,
                           theta: ProductionParams, max_expand: int = 10):
    """``(Phi_c_star, cv)``: income giving MCPE consumers the MCE utility level."""
    eps = np.atleast_1d(np.asarray(eps, dtype=float))
    pg = _mce_params(mce, p)
    shocks = DemandShockVector(eps)
    if not np.any(eps > 0):
        return p.Phi, 0.0
    warm = {"y": mce.y}

    def dlnU(phi_c):
        sol = solve_mcpe(tech, eps, pg, theta, phi_c, y0=warm["y"])
        warm["y"] = sol.y
        return utility_change(mce.y, 0.0, sol.y, sol.index, shocks, pg)

    lo, hi = p.Phi - 5.0, p.Phi + 5.0
    f_lo, f_hi = dlnU(lo), dlnU(hi)
    for _ in range(max_expand):
        if f_lo <= 0 <= f_hi:
            break
        width = hi - lo
        if f_lo > 0:
            lo -= width
            f_lo = dlnU(lo)
        if f_hi < 0:
            hi += width
            f_hi = dlnU(hi)
    else:
        if not f_lo <= 0 <= f_hi:
            raise EquilibriumError("CV root not bracketed after expansion")
    phi_star = brent_root(dlnU, lo, hi, tol=1e-12)
    return phi_star, math.exp(phi_star) - math.exp(p.Phi)


def profit_change(mce: EquilibriumSolution, mcpe: EquilibriumSolution, tech: FirmTech,
                  theta: ProductionParams) -> float:
    """Change in total profits: minus the change in total material cost."""
    cost_c = np.exp(tech.chi(mcpe.y, theta))
    cost_m = np.exp(tech.chi(mce.y, theta))
    return -math.fsum(cost_c - cost_m)


@dataclass(frozen=True)
class WelfareReport:
    cv_pct: float
    dpi_pct: float
    overall_pct: float
    phi_c_star: float
    mce: Optional[EquilibriumSolution] = None
    mcpe: Optional[EquilibriumSolution] = None


def welfare_report(mce: EquilibriumSolution, tech: FirmTech, eps, p: HSADemandParams,
                   theta: ProductionParams) -> WelfareReport:
    """CV, profit change and net gain as percentages of industry revenue exp(Phi)."""
    eps = np.atleast_1d(np.asarray(eps, dtype=float))
    pg = _mce_params(mce, p)
    mcpe = solve_mcpe(tech, eps, pg, theta, p.Phi, y0=mce.y)
    phi_star, cv = compensating_variation(mce, tech, eps, p, theta)
    dpi = profit_change(mce, mcpe, tech, theta)
    scale = 100.0 / math.exp(p.Phi)
    cv_pct, dpi_pct = cv * scale, dpi * scale
    return WelfareReport(cv_pct, dpi_pct, dpi_pct - cv_pct, phi_star, mce, mcpe)


def write_welfare_csv(path, rep: WelfareReport) -> None:
    rows = [("cv", rep.cv_pct), ("profit_change", rep.dpi_pct), ("overall", rep.overall_pct)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("metric,value_pct\n")
        for name, val in rows:
            fh.write(f"{name},{val:.17g}\n")
