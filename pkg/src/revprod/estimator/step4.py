"""Step 4: composite nonlinear least squares for the CoPaTh demand system.

On the firms with ``mu_hat > 1`` the demand shock implied by a trial
``(beta, gamma)`` is ``eps = (mu - 1) exp(gamma - beta y)``. The level
``delta`` is eliminated through the adding-up constraint, so the criterion
depends on ``(beta, gamma)`` only: squared revenue residuals plus squared
gaps between ``u_hat`` and the empirical rank of ``eps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize
from scipy.special import logsumexp
from scipy.stats import rankdata

from ..demand import _log_ratio
from ..numerics import SolverReport
from .step3 import StructuralEstimates

__all__ = ["CopathFit", "Step4Error", "step4_fit", "step4_objective", "BETA_FLOOR"]

BETA_FLOOR = 1e-4


class Step4Error(RuntimeError):
    pass


@dataclass
class CopathFit:
    beta_hat: float
    gamma_hat: float
    delta_hat: float
    eps_hat: np.ndarray
    firm_ids: np.ndarray  # the mu_hat > 1 subsample
    Phi: float
    objective: float
    n_starts_ok: int
    report: SolverReport = field(default_factory=lambda: SolverReport(True, 0, 0.0, ""))
    log_shares: Optional[np.ndarray] = None

    @property
    def share_sum(self) -> float:
        return float(np.sum(np.exp(self.log_shares)))


def _pieces(beta, gamma, y, mu):
    """``eps``, ``delta`` and log shares at ``(beta, gamma)``."""
    a = gamma - beta * y
    eps = (mu - 1.0) * np.exp(a)
    ls0 = -_log_ratio(a, eps) / beta
    delta = -float(logsumexp(ls0))
    return eps, delta, delta + ls0


def step4_objective(beta, gamma, r, y, mu, u, use_rank, Phi):
    if not beta > 0:
        return math.inf
    with np.errstate(over="ignore", invalid="ignore"):
        eps, _, ls = _pieces(beta, gamma, y, mu)
    if not (np.all(np.isfinite(eps)) and np.all(np.isfinite(ls))):
        return math.inf
    q = (rankdata(eps, method="average") - 0.5) / eps.size
    return float(np.sum((r - Phi - ls) ** 2) + np.sum((u[use_rank] - q[use_rank]) ** 2))


def step4_fit(
    est: StructuralEstimates,
    Phi: Optional[float] = None,
    beta_grid=(0.05, 0.1, 0.2, 0.4, 0.8),
    gamma_offsets=(-1.0, -0.5, 0.0, 0.5, 1.0),
    xatol: float = 1e-8,
    fatol: float = 1e-14,
    max_iter: int = 4000,
) -> CopathFit:
    """Fit ``(beta, gamma, delta)`` on the ``mu_hat > 1`` subsample.

    ``Phi`` defaults to the log total revenue of the subsample, the value
    under which the fitted shares add up to one on that subsample. Starts
    form the grid ``beta_grid`` x ``gamma_offsets`` with
    ``gamma = beta * median(y_hat) + offset``. Firms whose ``u_hat`` was
    clamped stay in the revenue term but are left out of the rank term.
    """
    sub = est.mu_hat > 1.0
    if not np.any(sub):
        raise Step4Error("no firm with an estimated markup above one")
    r, y, mu, u = est.r[sub], est.y_hat[sub], est.mu_hat[sub], est.u_hat[sub]
    clamped = est.clamped[sub] if est.clamped is not None else np.zeros(r.size, dtype=bool)
    use_rank = ~clamped
    if Phi is None:
        Phi = float(logsumexp(r))
    y_mid = float(np.median(y))

    # search in (ln beta, gamma - beta * median(y)): the raw pair is strongly collinear
    def unpack(x):
        beta = math.exp(x[0])
        return beta, x[1] + beta * y_mid

    def f(x):
        if x[0] < math.log(BETA_FLOOR) - 5.0 or x[0] > 5.0:
            return math.inf
        beta, gamma = unpack(x)
        return step4_objective(beta, gamma, r, y, mu, u, use_rank, Phi)

    best, n_ok = None, 0
    for b0 in beta_grid:
        for g0 in gamma_offsets:
            x0 = np.array([math.log(b0), g0])
            if not math.isfinite(f(x0)):
                continue
            res = optimize.minimize(
                f, x0, method="Nelder-Mead",
                options={"xatol": xatol, "fatol": fatol, "maxiter": max_iter, "maxfev": 2 * max_iter,
                         "initial_simplex": np.array([x0, x0 + [0.2, 0.0], x0 + [0.0, 0.2]])},
            )
            if not math.isfinite(res.fun):
                continue
            n_ok += 1
            if best is None or res.fun < best.fun:
                best = res
    if best is None:
        raise Step4Error("every start failed")
    beta, gamma = unpack(best.x)
    if beta <= BETA_FLOOR:
        raise Step4Error(f"beta driven to its floor ({beta:.3g})")
    eps, delta, ls = _pieces(beta, gamma, y, mu)
    rep = SolverReport(bool(best.success), int(best.nit), float(best.fun), str(best.message))
    return CopathFit(
        beta_hat=beta, gamma_hat=gamma, delta_hat=delta, eps_hat=eps, firm_ids=est.firm_ids[sub],
        Phi=Phi, objective=float(best.fun), n_starts_ok=n_ok, report=rep, log_shares=ls,
    )
