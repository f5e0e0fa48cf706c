"""Synthetic firm panels from the CoPaTh-HSA / Cobb-Douglas DGP."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.stats import rankdata

from .demand import HSADemandParams, ces_delta_q, log_share, markup
from .equilibrium import EquilibriumError, FirmTech, ProductionParams, solve_mce
from .numerics import brent_root
from .panel import Panel

__all__ = [
    "DGPConfig",
    "SimulationResult",
    "make_rng",
    "draw_exogenous",
    "simulate_panel",
    "simulate_ces_panel",
    "eps_quantile",
    "true_phi",
    "write_metadata",
    "read_metadata",
]


@dataclass(frozen=True)
class DGPConfig:
    n_firms: int = 600
    n_periods: int = 5
    theta: ProductionParams = field(default_factory=ProductionParams)
    ma_coef: float = 0.5
    zeta_range: Tuple[float, float] = (0.0, 0.3)
    k_l_persistence: float = 0.99
    k_l_omega_load: float = 0.11
    k_l_shock_sd: float = 0.25
    k_l_init_mean: float = 10.0
    k_l_init_sd: float = 1.0
    Phi: float = 20.0
    delta: float = -6.5
    beta: float = 0.21
    seed: int = 0
    eps_shift: float = 0.0
    # diagnostics: force eps to a constant and/or omega_0 to zero
    eps_override: Optional[float] = None
    omega_init_zero: bool = False

    def __post_init__(self):
        if self.n_firms < 1:
            raise ValueError("n_firms must be positive")
        if self.n_periods < 4:
            raise ValueError("the estimator needs at least 4 periods")
        lo, hi = self.zeta_range
        if not 0 <= lo <= hi:
            raise ValueError("zeta_range must satisfy 0 <= lo <= hi")
        if self.k_l_shock_sd < 0 or self.k_l_init_sd < 0 or self.beta <= 0:
            raise ValueError("scales must be non-negative and beta positive")
        if self.zeta_range[0] * (1 + self.ma_coef) + self.eps_shift < 0:
            raise ValueError("demand shocks must be non-negative")
        if self.eps_override is not None and self.eps_override < 0:
            raise ValueError("eps_override must be non-negative")

    @property
    def demand(self) -> HSADemandParams:
        return HSADemandParams(Phi=self.Phi, delta=self.delta, beta=self.beta, gamma=0.0)

    def with_rts(self, rts: float) -> "DGPConfig":
        cur = self.theta
        th = ProductionParams.with_rts(rts, shares=(cur.theta_m, cur.theta_k, cur.theta_l),
                                       rho_omega=cur.rho_omega, sigma_eta=cur.sigma_eta)
        return replace(self, theta=th)


def make_rng(seed: int, rep: int = 0) -> np.random.Generator:
    """Independent stream for replication ``rep`` of base seed ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=int(seed), spawn_key=(int(rep),))))


def draw_exogenous(cfg: DGPConfig, rep: int = 0) -> Dict[str, np.ndarray]:
    """Exogenous states, arrays of shape (n_firms, n_periods) for periods 1..T.

    ``zeta`` has shape (n_firms, n_periods + 2) and covers periods -1..T.
    """
    rng = make_rng(cfg.seed, rep)
    N, T = cfg.n_firms, cfg.n_periods
    th = cfg.theta
    sd0 = th.sigma_eta / math.sqrt(1.0 - th.rho_omega**2)
    omega_prev = np.zeros(N) if cfg.omega_init_zero else rng.normal(0.0, sd0, N)
    k_prev = rng.normal(cfg.k_l_init_mean, cfg.k_l_init_sd, N)
    l_prev = rng.normal(cfg.k_l_init_mean, cfg.k_l_init_sd, N)
    zeta = rng.uniform(cfg.zeta_range[0], cfg.zeta_range[1], size=(N, T + 2))
    omega = np.empty((N, T))
    k = np.empty((N, T))
    l = np.empty((N, T))
    for t in range(T):
        eta = rng.normal(0.0, th.sigma_eta, N)
        ek = rng.normal(0.0, cfg.k_l_shock_sd, N)
        el = rng.normal(0.0, cfg.k_l_shock_sd, N)
        k[:, t] = cfg.k_l_persistence * k_prev + cfg.k_l_omega_load * omega_prev + ek
        l[:, t] = cfg.k_l_persistence * l_prev + cfg.k_l_omega_load * omega_prev + el
        omega[:, t] = th.rho_omega * omega_prev + eta
        omega_prev, k_prev, l_prev = omega[:, t], k[:, t], l[:, t]
    # eps_t = a*zeta_{t-1} + zeta_t; column j of zeta is period j - 1
    eps = cfg.ma_coef * zeta[:, 1:-1] + zeta[:, 2:] + cfg.eps_shift
    if cfg.eps_override is not None:
        eps = np.full((N, T), float(cfg.eps_override))
    return {"omega": omega, "k": k, "l": l, "eps": eps, "zeta": zeta}


@dataclass
class SimulationResult:
    panel: Panel
    gamma: List[float]
    residuals: List[float]
    eps: np.ndarray  # (n_firms, n_periods)
    seed: int
    rep: int


def _ranks(x: np.ndarray) -> np.ndarray:
    return (rankdata(x, method="average") - 0.5) / x.size


def simulate_panel(cfg: DGPConfig, rep: int = 0) -> SimulationResult:
    """Simulate one replication; each period is an MCE with q_t = 0."""
    ex = draw_exogenous(cfg, rep)
    N, T = cfg.n_firms, cfg.n_periods
    th = cfg.theta
    cols = {c: [] for c in ("firm_id", "period", "r", "m", "k", "l", "omega", "u", "y", "p", "markup")}
    gammas, resid = [], []
    for t in range(T):
        k, l, om, eps = ex["k"][:, t], ex["l"][:, t], ex["omega"][:, t], ex["eps"][:, t]
        tech = FirmTech.build(k, l, om, th)
        try:
            sol = solve_mce(tech, eps, cfg.demand, th)
        except EquilibriumError as exc:
            raise EquilibriumError(f"period {t + 1}: {exc}", exc.report) from exc
        y = sol.y
        p = cfg.demand.replace(gamma=sol.index)
        r = cfg.Phi + log_share(y, eps, p)
        m = tech.chi(y, th)
        cols["firm_id"].append(np.arange(1, N + 1))
        cols["period"].append(np.full(N, t + 1))
        cols["r"].append(r)
        cols["m"].append(m)
        cols["k"].append(k)
        cols["l"].append(l)
        cols["omega"].append(om)
        cols["u"].append(_ranks(eps))
        cols["y"].append(y)
        cols["p"].append(r - y)
        cols["markup"].append(markup(y, eps, p))
        gammas.append(sol.index)
        resid.append(sol.report.residual_norm)
    panel = Panel({c: np.concatenate(v) for c, v in cols.items()})
    return SimulationResult(panel=panel, gamma=gammas, residuals=resid, eps=ex["eps"], seed=cfg.seed, rep=rep)


def simulate_ces_panel(cfg: DGPConfig, rep: int = 0) -> SimulationResult:
    """Generalized-CES world: log revenue ``Phi + delta + (y - q) / (1 + eps)``.

    Markups equal ``1 + eps`` regardless of output. Each period solves the
    firms' first-order conditions in closed form given ``q`` and then ``q``
    from the adding-up constraint. ``gamma`` entries hold the solved ``q``.
    """
    ex = draw_exogenous(cfg, rep)
    N, T = cfg.n_firms, cfg.n_periods
    th = cfg.theta
    cols = {c: [] for c in ("firm_id", "period", "r", "m", "k", "l", "omega", "u", "y", "p", "markup")}
    qs = []
    for t in range(T):
        k, l, om, eps = ex["k"][:, t], ex["l"][:, t], ex["omega"][:, t], ex["eps"][:, t]
        tech = FirmTech.build(k, l, om, th)
        rho = 1.0 / (1.0 + eps)
        c = 1.0 / th.theta_m - rho
        A = cfg.Phi + cfg.delta + np.log(rho) + tech.xi
        # y_i - q = (A_i - q / theta_m) / c_i; shares exp(delta + rho_i (y_i - q)) add to one
        q = ces_delta_q(th.theta_m * A, rho / (c * th.theta_m), np.full(N, cfg.delta))
        y = (A - rho * q) / c
        r = cfg.Phi + cfg.delta + rho * (y - q)
        cols["firm_id"].append(np.arange(1, N + 1))
        cols["period"].append(np.full(N, t + 1))
        cols["r"].append(r)
        cols["m"].append(tech.chi(y, th))
        cols["k"].append(k)
        cols["l"].append(l)
        cols["omega"].append(om)
        cols["u"].append(_ranks(eps))
        cols["y"].append(y)
        cols["p"].append(r - y)
        cols["markup"].append(1.0 + eps)
        qs.append(float(q))
    panel = Panel({c: np.concatenate(v) for c, v in cols.items()})
    return SimulationResult(panel=panel, gamma=qs, residuals=[0.0] * T, eps=ex["eps"], seed=cfg.seed, rep=rep)


def eps_quantile(u, cfg: DGPConfig):
    """Population quantile function of the MA(1) demand shock."""
    u = np.asarray(u, dtype=float)
    if cfg.eps_override is not None:
        return np.full(u.shape, float(cfg.eps_override))
    lo, hi = cfg.zeta_range
    w = hi - lo
    a_w, b_w = sorted((abs(cfg.ma_coef) * w, w))
    base = lo * (1.0 + cfg.ma_coef) + cfg.eps_shift
    if a_w == 0.0:
        return base + u * b_w
    cut = a_w / (2.0 * b_w)
    x = np.where(
        u <= cut,
        np.sqrt(2.0 * a_w * b_w * np.clip(u, 0, None)),
        np.where(u <= 1.0 - cut, u * b_w + 0.5 * a_w, a_w + b_w - np.sqrt(2.0 * a_w * b_w * np.clip(1.0 - u, 0, None))),
    )
    return base + x


def true_phi(cfg: DGPConfig, gamma: float, m, u):
    """Population revenue at log material ``m`` and demand rank ``u``.

    Solves the first-order condition ``m - r = ln theta_m - ln markup`` for
    output on its increasing branch, then evaluates revenue.
    """
    m, u = np.broadcast_arrays(np.asarray(m, dtype=float), np.asarray(u, dtype=float))
    eps = eps_quantile(u, cfg)
    p = cfg.demand.replace(gamma=gamma)
    ln_tm = math.log(cfg.theta.theta_m)
    out = np.empty(m.shape)
    for idx in np.ndindex(m.shape):
        e, mi = float(eps[idx]), float(m[idx])

        def g(y):
            return cfg.Phi + log_share(y, e, p) + ln_tm - math.log(markup(y, e, p)) - mi

        if e > 0:
            hi = (gamma + math.log(1.0 / (p.beta * e))) / p.beta
        else:
            hi = mi + 50.0
        lo = hi - 10.0
        while g(lo) > 0:
            lo -= 10.0
        while e == 0 and g(hi) < 0:
            hi += 10.0
        y = brent_root(g, lo, hi, tol=1e-12)
        out[idx] = cfg.Phi + log_share(y, e, p)
    return out


def write_metadata(path, sim: SimulationResult) -> None:
    """Flat ``key=value`` sidecar with seed, gamma_t and solver residuals."""
    lines = [f"seed={sim.seed}", f"rep={sim.rep}"]
    for t, (g, res) in enumerate(zip(sim.gamma, sim.residuals), start=1):
        lines.append(f"gamma_{t}={g:.17g}")
        lines.append(f"residual_{t}={res:.17g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_metadata(path) -> Dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, val = line.partition("=")
                out[key.strip()] = val.strip()
    return out
