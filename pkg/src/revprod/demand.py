"""CoPaTh-HSA demand: budget shares, markups, quantity indices, utility.

All functions work with logs. ``y`` is log output, the log budget share of a
firm is ``log_share(y - dq, eps)`` where ``dq`` is the change of the
quantity index relative to the baseline state (``q = 0`` at baseline).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .numerics import NumericsError, brent_root, quad_adaptive

__all__ = [
    "DemandError",
    "HSADemandParams",
    "DemandShockVector",
    "log_share",
    "log_share_deriv",
    "reduced_revenue",
    "markup",
    "invert_revenue",
    "solve_delta_q",
    "utility_change",
    "ces_delta_q",
    "ces_log_utility",
    "copath_upsilon",
    "hdia_delta_a",
    "hdia_delta_b",
    "hiia_delta_a",
    "hiia_delta_b",
]


class DemandError(ValueError):
    pass


@dataclass(frozen=True)
class HSADemandParams:
    """Parameters of the reduced-form CoPaTh revenue function."""

    Phi: float
    delta: float
    beta: float
    gamma: float = 0.0

    def __post_init__(self):
        if not self.beta > 0:
            raise DemandError(f"beta must be positive, got {self.beta}")

    def replace(self, **kw) -> "HSADemandParams":
        return HSADemandParams(**{**self.__dict__, **kw})


@dataclass(frozen=True)
class DemandShockVector:
    eps: np.ndarray
    u: Optional[np.ndarray] = None

    def __post_init__(self):
        eps = np.asarray(self.eps, dtype=float)
        if not np.all(np.isfinite(eps)) or np.any(eps < 0):
            raise DemandError("demand shocks must be finite and non-negative")
        object.__setattr__(self, "eps", eps)
        if self.u is not None:
            u = np.asarray(self.u, dtype=float)
            if np.any((u < 0) | (u > 1)):
                raise DemandError("demand ranks must lie in [0, 1]")
            object.__setattr__(self, "u", u)

    def __len__(self):
        return self.eps.size


def _log_ratio(a, eps):
    """``ln((exp(a) + eps) / (1 + eps))`` without cancellation near a = 0."""
    a = np.asarray(a, dtype=float)
    eps = np.asarray(eps, dtype=float)
    small = a < 30.0
    a_s = np.where(small, a, 0.0)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        out_small = np.log1p(np.expm1(a_s) / (1.0 + eps))
        a_l = np.where(small, 30.0, a)
        out_large = a_l + np.log1p(eps * np.exp(-a_l)) - np.log1p(eps)
    return np.where(small, out_small, out_large)


def log_share(y_rel, eps, p: HSADemandParams):
    """Log budget share at log relative quantity ``y_rel``."""
    out = p.delta - _log_ratio(-p.beta * np.asarray(y_rel, dtype=float) + p.gamma, eps) / p.beta
    if not np.all(np.isfinite(out)):
        raise DemandError("non-finite log share")
    return out[()] if np.ndim(out) == 0 else out


def log_share_deriv(y_rel, eps, p: HSADemandParams):
    """``d log_share / d y_rel``; the inverse markup."""
    return 1.0 / markup(y_rel, eps, p)


def reduced_revenue(y, eps, p: HSADemandParams):
    """Log revenue at log output ``y`` with the baseline index ``q = 0``."""
    return p.Phi + log_share(y, eps, p)


def markup(y, eps, p: HSADemandParams):
    """Price over marginal cost, ``1 + eps * exp(beta*y - gamma)``."""
    out = 1.0 + np.asarray(eps, dtype=float) * np.exp(p.beta * np.asarray(y, dtype=float) - p.gamma)
    return out[()] if np.ndim(out) == 0 else out


def invert_revenue(r, eps, p: HSADemandParams):
    """Log output that yields log revenue ``r``."""
    r = np.asarray(r, dtype=float)
    eps = np.asarray(eps, dtype=float)
    arg = (1.0 + eps) * np.exp(-p.beta * (r - p.Phi - p.delta)) - eps
    if np.any(arg <= 0):
        raise DemandError("revenue not attainable for this demand shock")
    out = (p.gamma - np.log(arg)) / p.beta
    return out[()] if out.ndim == 0 else out


def _share_solution(level, eps, p):
    """Per-firm ``y_rel`` with ``log_share(y_rel) == level`` (nan if none)."""
    arg = (1.0 + eps) * np.exp(p.beta * (p.delta - level)) - eps
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(arg > 0, (p.gamma - np.log(arg)) / p.beta, np.nan)


def _expanding_root(h, lo, hi, max_expand=60):
    """Root of decreasing ``h``; widen ``[lo, hi]`` by doubling until it brackets."""
    if not lo < hi:
        lo, hi = min(lo, hi) - 0.5, max(lo, hi) + 0.5
    for _ in range(max_expand):
        h_lo, h_hi = h(lo), h(hi)
        if h_lo >= 0 >= h_hi:
            return brent_root(h, lo, hi, tol=1e-14)
        width = hi - lo
        if h_lo < 0:
            lo -= width
        if h_hi > 0:
            hi += width
    raise DemandError("bracket expansion cap reached")


def solve_delta_q(y, shocks: DemandShockVector, p: HSADemandParams) -> float:
    """Quantity-index change that makes budget shares add up to one."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    eps = shocks.eps
    if y.size == 0:
        raise DemandError("need at least one firm")

    def h(dq):
        return float(logsumexp(log_share(y - dq, eps, p)))

    lo_i = y - _share_solution(0.0, eps, p)
    hi_i = y - _share_solution(-math.log(y.size), eps, p)
    lo = np.nanmin(lo_i) if np.any(np.isfinite(lo_i)) else float(y.mean()) - 1.0
    hi = np.nanmax(hi_i) if np.any(np.isfinite(hi_i)) else float(y.mean()) + 1.0
    return _expanding_root(h, float(lo), float(hi))


def utility_change(y_from, dq_from, y_to, dq_to, shocks: DemandShockVector, p: HSADemandParams,
                   tol: float = 1e-10) -> float:
    """Change in log utility between two states of the same economy."""
    y_from = np.atleast_1d(np.asarray(y_from, dtype=float))
    y_to = np.atleast_1d(np.asarray(y_to, dtype=float))
    if not (y_from.size == y_to.size == len(shocks)):
        raise DemandError("state vectors and shocks differ in length")
    lo = y_from - dq_from
    hi = y_to - dq_to
    total = []
    for i in range(y_from.size):  # fixed ascending order
        e = shocks.eps[i]
        total.append(quad_adaptive(lambda z, e=e: np.exp(log_share(z, e, p)), lo[i], hi[i], tol=tol))
    return float((dq_to - dq_from) + math.fsum(total))


# --------------------------------------------------------------------------
# generalized CES with heterogeneous elasticities
# --------------------------------------------------------------------------


def ces_delta_q(y, rho, delta_het) -> float:
    """Index change solving ``sum exp(rho_i (y_i - dq) + delta_i) = 1``."""
    y, rho, d = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (y, rho, delta_het))
    if np.any(rho <= 0):
        raise DemandError("CES elasticity parameters must be positive")
    lo = float(np.min(y + d / rho))
    hi = float(np.max(y + (d + math.log(y.size)) / rho))

    def h(dq):
        return float(logsumexp(rho * (y - dq) + d))

    if lo == hi:
        return lo
    return brent_root(h, lo, hi, tol=1e-14)


def ces_log_utility(y, rho, delta_het, dq) -> float:
    """Log utility (up to a constant) of the heterogeneous CES system."""
    y, rho, d = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (y, rho, delta_het))
    return float(dq + np.sum(np.exp(rho * (y - dq) + d) / rho))


# --------------------------------------------------------------------------
# HDIA / HIIA index changes
# --------------------------------------------------------------------------


def copath_upsilon(p: HSADemandParams, shocks: DemandShockVector) -> Callable:
    """CoPaTh-shaped reduced share ``upsilon(zeta, i)`` for index tests."""

    def upsilon(zeta, i):
        return log_share(zeta, shocks.eps[i], p)

    return upsilon


def _index_delta_a(base, new, reduced_upsilon, tol=1e-10):
    base = np.atleast_1d(np.asarray(base, dtype=float))
    new = np.atleast_1d(np.asarray(new, dtype=float))

    def h(da):
        parts = [
            quad_adaptive(lambda z, i=i: np.exp(reduced_upsilon(z, i)), base[i], new[i] - da, tol=tol * 1e-2)
            for i in range(base.size)
        ]
        return math.fsum(parts)

    shift = new - base
    lo, hi = float(shift.min()), float(shift.max())
    if lo == hi:
        return lo
    try:
        return brent_root(h, lo, hi, tol=tol)
    except NumericsError as exc:
        raise DemandError(str(exc)) from exc


def _index_delta_b(new, delta_a, reduced_upsilon):
    new = np.atleast_1d(np.asarray(new, dtype=float))
    vals = np.array([float(reduced_upsilon(new[i] - delta_a, i)) for i in range(new.size)])
    return float(logsumexp(vals))


def hdia_delta_a(y_base, y_new, shocks, reduced_upsilon) -> float:
    """Change in the utility aggregator of an HDIA system (quantities)."""
    return _index_delta_a(y_base, y_new, reduced_upsilon)


def hdia_delta_b(y_new, delta_a, shocks, reduced_upsilon) -> float:
    return _index_delta_b(y_new, delta_a, reduced_upsilon)


def hiia_delta_a(p_base, p_new, shocks, reduced_upsilon) -> float:
    """Change in the log ideal price index of an HIIA system (prices)."""
    return _index_delta_a(p_base, p_new, reduced_upsilon)


def hiia_delta_b(p_new, delta_a, shocks, reduced_upsilon) -> float:
    return _index_delta_b(p_new, delta_a, reduced_upsilon)
