"""Steps 1-4 chained at one estimation period, plus result I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from ..demand import HSADemandParams
from ..equilibrium import FirmTech, ProductionParams, WelfareReport, solve_mce, welfare_report
from ..panel import Panel, PanelError, read_panel, trim_shares
from .step1 import IVQRFit, step1_fit, step1_invert_many
from .step2 import TransformFit, step2_fit
from .step3 import StructuralEstimates, step3_recover
from .step4 import CopathFit, step4_fit

__all__ = [
    "EstimationConfig",
    "EstimationError",
    "EstimationResult",
    "estimate_panel",
    "write_estimates",
    "read_estimates",
    "write_firm_estimates",
    "read_firm_estimates",
    "counterfactual_from_estimates",
]

FIRM_COLUMNS = ("firm_id", "u_hat", "omega_hat", "y_hat", "p_hat", "mu_hat")


class EstimationError(RuntimeError):
    """Failure of one pipeline stage; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class EstimationConfig:
    L: int = 100
    bandwidth: Optional[float] = None
    weight: str = "optimal"
    step1_floor: float = 1e-4
    step2_floor: float = 1e-3
    rho0: float = 0.5
    pool_step2: bool = False
    rts: float = 1.0
    trim_lower: float = 0.0
    trim_upper: float = 1.0
    trim_by_period: bool = False
    period: Optional[int] = None  # default: last period

    def __post_init__(self):
        if self.L < 3:
            raise ValueError("L must be at least 3")
        if self.weight not in ("optimal", "identity"):
            raise ValueError("weight must be 'optimal' or 'identity'")
        if not self.rts > 0:
            raise ValueError("rts must be positive")
        if not 0 <= self.trim_lower < self.trim_upper <= 1:
            raise ValueError("need 0 <= trim_lower < trim_upper <= 1")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")


@dataclass
class EstimationResult:
    period: int
    firm_ids: np.ndarray
    fit1: IVQRFit
    fit1_lag: IVQRFit
    fit2: TransformFit
    structural: StructuralEstimates
    copath: CopathFit
    u_hat: np.ndarray
    u_hat_lag: np.ndarray
    clamped: np.ndarray
    diagnostics: Dict[str, float] = field(default_factory=dict)


def estimate_panel(panel: Panel, cfg: EstimationConfig = EstimationConfig()) -> EstimationResult:
    """Run the four steps at ``cfg.period`` (default: the last period)."""
    periods = panel.periods
    t = int(cfg.period) if cfg.period is not None else int(periods.max())
    if periods.size < 4 or t - 3 < periods.min():
        raise EstimationError("input", "the estimator needs T >= 4 periods (t, t-1, t-2, t-3)")
    try:
        panel = trim_shares(panel, cfg.trim_lower, cfg.trim_upper, cfg.trim_by_period)
    except PanelError as exc:
        raise EstimationError("trim", str(exc)) from exc
    ids = panel.firms_with_lags(t, 3)
    if ids.size < 30:
        raise EstimationError("input", f"only {ids.size} firms observed over periods {t - 3}..{t}")
    kw = dict(L=cfg.L, bandwidth=cfg.bandwidth, weight=cfg.weight, floor=cfg.step1_floor, firm_ids=ids)
    try:
        fit1 = step1_fit(panel, t, **kw)
        fit1_lag = step1_fit(panel, t - 1, **kw)
        fit1_lag2 = step1_fit(panel, t - 2, **kw) if cfg.pool_step2 else None
    except Exception as exc:
        raise EstimationError("step1", str(exc)) from exc
    data = panel.aligned(t, lags=(0, 1, 2), firm_ids=ids)
    u_t, cl_t = step1_invert_many(fit1, data[0]["m"], data[0]["r"])
    u_tm1, cl_tm1 = step1_invert_many(fit1_lag, data[1]["m"], data[1]["r"])
    pooled = ()
    if fit1_lag2 is not None:
        u_tm2, _ = step1_invert_many(fit1_lag2, data[2]["m"], data[2]["r"])
        pooled = ((t - 1, u_tm1, u_tm2),)
    try:
        fit2 = step2_fit(panel, t, u_t, u_tm1, ids, floor=cfg.step2_floor, rho0=cfg.rho0, pooled=pooled)
    except Exception as exc:
        raise EstimationError("step2", str(exc)) from exc
    try:
        est = step3_recover(panel, t, fit2, fit1, u_t, rts=cfg.rts, clamped=cl_t)
    except Exception as exc:
        raise EstimationError("step3", str(exc)) from exc
    try:
        cop = step4_fit(est)
    except Exception as exc:
        raise EstimationError("step4", str(exc)) from exc
    diag = {
        "n_firms": float(ids.size),
        "n_clamped": float(cl_t.sum()),
        "n_clamped_lag": float(cl_tm1.sum()),
        "n_theta_m_median": float(est.n_median),
        "n_theta_m_excluded": float(est.n_excluded),
        "n_step4": float(cop.firm_ids.size),
        "step1_objective": fit1.objective,
        "step1_converged": float(fit1.report.converged),
        "step1_lag_converged": float(fit1_lag.report.converged),
        "step2_loglik": fit2.loglik,
        "step2_kkt": fit2.report.residual_norm,
        "step2_converged": float(fit2.report.converged),
        "step4_objective": cop.objective,
        "step4_starts_ok": float(cop.n_starts_ok),
    }
    return EstimationResult(
        period=t, firm_ids=ids, fit1=fit1, fit1_lag=fit1_lag, fit2=fit2, structural=est, copath=cop,
        u_hat=u_t, u_hat_lag=u_tm1, clamped=cl_t, diagnostics=diag,
    )


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------


def write_estimates(path, res: EstimationResult) -> None:
    """Flat ``key=value`` text with parameters, counts and diagnostics."""
    est, cop = res.structural, res.copath
    vals = {
        "period": res.period,
        "rts": est.rts,
        "theta_m_hat": est.theta_m,
        "theta_k_hat": est.theta_k,
        "theta_l_hat": est.theta_l,
        "b_tilde": est.b_tilde,
        "a2_hat": est.a2_hat,
        "rho_hat": res.fit2.rho_hat,
        "beta_hat": cop.beta_hat,
        "gamma_hat": cop.gamma_hat,
        "delta_hat": cop.delta_hat,
        "Phi": cop.Phi,
    }
    vals.update(res.diagnostics)
    with open(path, "w", encoding="utf-8") as fh:
        for key, val in vals.items():
            fh.write(f"{key}={_fmt(val)}\n")


def _fmt(val) -> str:
    if isinstance(val, (int, np.integer)) or (isinstance(val, float) and val.is_integer() and abs(val) < 1e15):
        return str(int(val))
    return f"{float(val):.17g}"


def read_estimates(path) -> Dict[str, float]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ValueError(f"line {n + 1}: expected key=value")
            out[key.strip()] = float(val)
    for key in ("theta_m_hat", "theta_k_hat", "theta_l_hat", "rho_hat", "beta_hat", "gamma_hat", "delta_hat", "Phi"):
        if key not in out:
            raise ValueError(f"estimates file lacks {key}")
    return out


def write_firm_estimates(path, res: EstimationResult) -> None:
    est = res.structural
    cols = [est.firm_ids, est.u_hat, est.omega_hat, est.y_hat, est.p_hat, est.mu_hat]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(FIRM_COLUMNS) + "\n")
        for i in range(est.firm_ids.size):
            fh.write(f"{int(cols[0][i])}," + ",".join(f"{float(c[i]):.17g}" for c in cols[1:]) + "\n")


def read_firm_estimates(path) -> Dict[str, np.ndarray]:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    if tuple(header) != FIRM_COLUMNS:
        raise ValueError(f"unexpected firm-estimate header {header}")
    out = {c: arr[:, j] for j, c in enumerate(FIRM_COLUMNS)}
    out["firm_id"] = out["firm_id"].astype(np.int64)
    return out


# --------------------------------------------------------------------------
# counterfactual
# --------------------------------------------------------------------------


def counterfactual_from_estimates(panel: Panel, estimates: Dict[str, float],
                                  firms: Dict[str, np.ndarray]) -> WelfareReport:
    """Welfare of moving the estimated economy from MCE to marginal-cost pricing.

    Uses the ``mu_hat > 1`` firms of the estimation period with their
    estimated TFP and implied demand shocks. The MCE is re-solved under the
    estimated demand before the MCPE and CV are computed.
    """
    t = int(estimates["period"]) if "period" in estimates else int(panel.periods.max())
    sub = firms["mu_hat"] > 1.0
    if not np.any(sub):
        raise ValueError("no firm with an estimated markup above one")
    ids = firms["firm_id"][sub]
    cur = panel.aligned(t, lags=(0,), firm_ids=ids)[0]
    rts = estimates.get("rts", 1.0)
    th = ProductionParams(
        theta_m=rts - estimates["theta_k_hat"] - estimates["theta_l_hat"],
        theta_k=estimates["theta_k_hat"], theta_l=estimates["theta_l_hat"],
        rho_omega=min(max(estimates["rho_hat"], 0.0), 0.999), rts=rts,
    )
    beta, gamma = estimates["beta_hat"], estimates["gamma_hat"]
    y, mu = firms["y_hat"][sub], firms["mu_hat"][sub]
    eps = (mu - 1.0) * np.exp(gamma - beta * y)
    p = HSADemandParams(Phi=estimates["Phi"], delta=estimates["delta_hat"], beta=beta, gamma=gamma)
    tech = FirmTech.build(cur["k"], cur["l"], firms["omega_hat"][sub], th)
    if not math.isfinite(float(np.sum(eps))):
        raise ValueError("non-finite implied demand shocks")
    mce = solve_mce(tech, eps, p, th, y0=y)
    return welfare_report(mce, tech, eps, p, th)
