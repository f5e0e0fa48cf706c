"""Step 3: production elasticities, markups, TFP, output and price.

``theta_m`` comes from the markup identity ``mu = theta_m / s`` combined
with the revenue slope: ``theta_m = (d lambda/dm) s / (d phi/dm - s)``. The
median over firms is used, dropping firms where ``d phi/dm <= s``. The
common scale is then fixed by the returns to scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..panel import Panel
from .step1 import IVQRFit
from .step2 import TransformFit

__all__ = ["StructuralEstimates", "Step3Error", "step3_recover"]


class Step3Error(RuntimeError):
    pass


@dataclass
class StructuralEstimates:
    theta_hat: np.ndarray  # (theta_m, theta_k, theta_l)
    theta_tilde: np.ndarray  # unnormalized
    b_tilde: float
    a2_hat: float
    rts: float
    firm_ids: np.ndarray
    r: np.ndarray
    u_hat: np.ndarray
    omega_hat: np.ndarray
    y_hat: np.ndarray
    p_hat: np.ndarray
    mu_hat: np.ndarray
    s_m: np.ndarray
    n_median: int
    n_excluded: int
    clamped: Optional[np.ndarray] = None

    @property
    def theta_m(self) -> float:
        return float(self.theta_hat[0])

    @property
    def theta_k(self) -> float:
        return float(self.theta_hat[1])

    @property
    def theta_l(self) -> float:
        return float(self.theta_hat[2])


def step3_recover(
    panel: Panel,
    t: int,
    fit2: TransformFit,
    fit1: IVQRFit,
    u_hat,
    rts: float = 1.0,
    clamped=None,
) -> StructuralEstimates:
    """Recover structural objects for the firms of ``fit2`` at period ``t``.

    ``u_hat`` is aligned with ``fit2.firm_ids``.
    """
    if not rts > 0:
        raise ValueError("rts must be positive")
    ids = np.asarray(fit2.firm_ids)
    cur = panel.aligned(t, lags=(0,), firm_ids=ids)[0]
    r, m, k, l = cur["r"], cur["m"], cur["k"], cur["l"]
    u_hat = np.asarray(u_hat, dtype=float)
    if u_hat.shape != r.shape:
        raise ValueError("u_hat is not aligned with the step-2 firms")
    s = np.exp(m - r)
    dlam = fit2.dlam_dm(m, u_hat)
    dphi = fit1.dphi_dm(m, u_hat)
    keep = dphi - s > 0
    if not np.any(keep):
        raise Step3Error("no firm has a revenue slope above its material share")
    theta_m_tilde = float(np.median(dlam[keep] * s[keep] / (dphi[keep] - s[keep])))
    theta_tilde = np.array([theta_m_tilde, fit2.theta_k_tilde, fit2.theta_l_tilde])
    b = float(theta_tilde.sum())
    if not b > 0:
        raise Step3Error(f"non-positive scale b = {b:.6g}")
    theta_hat = rts * theta_tilde / b
    lam = fit2.lam(m, u_hat)
    resid = lam - fit2.theta_k_tilde * k - fit2.theta_l_tilde * l
    a2 = float(np.mean(resid))
    omega = rts * (resid - a2) / b
    y = omega + theta_hat[0] * m + theta_hat[1] * k + theta_hat[2] * l
    return StructuralEstimates(
        theta_hat=theta_hat, theta_tilde=theta_tilde, b_tilde=b, a2_hat=a2, rts=float(rts),
        firm_ids=ids, r=r, u_hat=u_hat, omega_hat=omega, y_hat=y, p_hat=r - y,
        mu_hat=theta_hat[0] / s, s_m=s, n_median=int(keep.sum()), n_excluded=int((~keep).sum()),
        clamped=None if clamped is None else np.asarray(clamped, dtype=bool),
    )
