import math

import numpy as np
import pytest
from scipy.optimize import brentq

from revprod.demand import DemandShockVector, HSADemandParams, log_share, markup, utility_change
from revprod.equilibrium import (
    EquilibriumError,
    FirmTech,
    ProductionParams,
    compensating_variation,
    mce_jacobian,
    mce_residual,
    mcpe_jacobian,
    mcpe_residual,
    profit_change,
    solve_mce,
    solve_mcpe,
    welfare_report,
    write_welfare_csv,
)
from revprod.simulator import DGPConfig, simulate_panel

# frozen from tests/oracles/derive.py
MCE_N1_EPS0_Y = 13.653483707250337974
MCE_N1_EPS0_GAMMA = 1.5022315785225709745
PROFIT_CHANGE_N1 = -2.1165224481547039897

TH = ProductionParams()
P = HSADemandParams(Phi=20.0, delta=-6.5, beta=0.21)


def economy(n=40, seed=0, eps_hi=0.45):
    rng = np.random.default_rng(seed)
    tech = FirmTech.build(rng.normal(10, 1, n), rng.normal(10, 1, n), rng.normal(0, 0.08, n), TH)
    return tech, rng.uniform(0.0, eps_hi, n)


def fd_jacobian(f, x, h=1e-6):
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.array(cols).T


def log_mr_minus_mc(y, tech, eps, p, shift=0.0, Phi=None):
    """Levels form: ln MR - ln MC with MR = R s'(y)/Y and MC = exp(chi)/(theta_m Y)."""
    Phi = p.Phi if Phi is None else Phi
    s = log_share(y - shift, eps, p)
    return Phi + s - np.log(markup(y - shift, eps, p)) - (tech.chi(y, TH) - math.log(TH.theta_m))


def test_production_params_validation():
    with pytest.raises(ValueError):
        ProductionParams(theta_m=0.5, theta_k=0.3, theta_l=0.3)
    with pytest.raises(ValueError):
        ProductionParams(rho_omega=1.0)
    th = ProductionParams.with_rts(0.9)
    assert th.theta_m + th.theta_k + th.theta_l == pytest.approx(0.9, abs=1e-12)
    assert th.theta_k / 0.9 == pytest.approx(0.3, abs=1e-15)


def test_xi_recomputable():
    tech, _ = economy()
    xi = math.log(TH.theta_m) + (TH.theta_k * tech.k + TH.theta_l * tech.l + tech.omega) / TH.theta_m
    np.testing.assert_allclose(tech.xi, xi, atol=1e-12)


def test_single_firm_without_shock_matches_scalar_root():
    tech = FirmTech.build([9.8], [10.1], [0.05], TH)
    sol = solve_mce(tech, [0.0], P, TH)
    assert sol.y[0] == pytest.approx(MCE_N1_EPS0_Y, abs=1e-9)
    assert sol.index == pytest.approx(MCE_N1_EPS0_GAMMA, abs=1e-9)
    # second route: scalar FOC with gamma eliminated by the unit share
    foc = lambda y: P.Phi - (y - TH.theta_k * 9.8 - TH.theta_l * 10.1 - 0.05) / TH.theta_m + math.log(TH.theta_m)
    assert sol.y[0] == pytest.approx(brentq(foc, 0, 50, xtol=1e-14), abs=1e-9)


def test_single_firm_mcpe_matches_scalar_root():
    tech = FirmTech.build([9.8], [10.1], [0.05], TH)
    eps = np.array([0.3])
    mce = solve_mce(tech, eps, P, TH)
    pg = P.replace(gamma=mce.index)
    sol = solve_mcpe(tech, eps, pg, TH, 20.3)
    # with one firm the share is one, so y - dq is pinned and y solves price = marginal cost
    z = brentq(lambda v: log_share(v, eps[0], pg), -100, 100, xtol=1e-14)
    y = brentq(lambda v: 20.3 - (v - TH.theta_k * 9.8 - TH.theta_l * 10.1 - 0.05) / TH.theta_m + math.log(TH.theta_m),
               0, 60, xtol=1e-14)
    assert sol.y[0] == pytest.approx(y, abs=1e-9)
    assert sol.index == pytest.approx(y - z, abs=1e-9)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mce_solution_conditions(seed):
    tech, eps = economy(seed=seed)
    sol = solve_mce(tech, eps, P, TH)
    assert sol.report.converged and sol.report.residual_norm < 1e-10
    assert sol.share_sum == pytest.approx(1.0, abs=1e-10)
    pg = P.replace(gamma=sol.index)
    assert np.max(np.abs(log_mr_minus_mc(sol.y, tech, eps, pg))) < 1e-8
    # markups two ways: demand formula and price over marginal cost
    price = np.exp(P.Phi + log_share(sol.y, eps, pg) - sol.y)
    mc = np.exp(tech.chi(sol.y, TH) - sol.y) / TH.theta_m
    np.testing.assert_allclose(sol.markups, price / mc, rtol=1e-8)
    assert np.all(sol.markups[eps > 0] > 1)


@pytest.mark.parametrize("seed", [0, 3])
def test_mcpe_solution_conditions(seed):
    tech, eps = economy(seed=seed)
    mce = solve_mce(tech, eps, P, TH)
    pg = P.replace(gamma=mce.index)
    sol = solve_mcpe(tech, eps, pg, TH, P.Phi)
    assert sol.report.residual_norm < 1e-10
    assert sol.share_sum == pytest.approx(1.0, abs=1e-10)
    price = P.Phi + log_share(sol.y - sol.index, eps, pg) - sol.y
    mc = tech.chi(sol.y, TH) - sol.y - math.log(TH.theta_m)
    assert np.max(np.abs(price - mc)) < 1e-8


def test_analytic_jacobians_match_differences():
    tech, eps = economy(n=8, seed=5)
    mce = solve_mce(tech, eps, P, TH)
    for x in (np.append(mce.y, mce.index), np.append(mce.y + 0.3, mce.index - 0.2)):
        f = lambda v: mce_residual(v, tech, eps, P, TH)
        J = mce_jacobian(x, tech, eps, P, TH)
        np.testing.assert_allclose(J, fd_jacobian(f, x), rtol=1e-5, atol=1e-7)
        pg = P.replace(gamma=mce.index)
        g = lambda v: mcpe_residual(v, tech, eps, pg, TH, 20.1)
        np.testing.assert_allclose(mcpe_jacobian(x, tech, eps, pg, TH, 20.1), fd_jacobian(g, x), rtol=1e-5, atol=1e-7)


def test_omega_shift_matches_fresh_solve():
    tech, eps = economy(seed=2)
    base = solve_mce(tech, eps, P, TH)
    shifted = FirmTech.build(tech.k, tech.l, tech.omega + 0.1, TH)
    np.testing.assert_allclose(shifted.xi, tech.xi + 0.1 / TH.theta_m, atol=1e-12)
    warm = solve_mce(shifted, eps, P, TH, y0=base.y)
    cold = solve_mce(shifted, eps, P, TH)
    np.testing.assert_allclose(warm.y, cold.y, atol=1e-9)
    assert warm.index == pytest.approx(cold.index, abs=1e-9)


def test_mcpe_phi_shift_matches_fresh_solve():
    tech, eps = economy(seed=4)
    mce = solve_mce(tech, eps, P, TH)
    pg = P.replace(gamma=mce.index)
    a = solve_mcpe(tech, eps, pg, TH, P.Phi + 0.4, y0=mce.y)
    b = solve_mcpe(tech, eps, pg, TH, P.Phi + 0.4)
    np.testing.assert_allclose(a.y, b.y, atol=1e-9)
    assert a.index == pytest.approx(b.index, abs=1e-9)


def test_competitive_economy_has_no_distortion():
    tech, _ = economy(n=10, seed=6)
    eps = np.zeros(10)
    mce = solve_mce(tech, eps, P, TH)
    mcpe = solve_mcpe(tech, eps, P.replace(gamma=mce.index), TH, P.Phi)
    np.testing.assert_allclose(mcpe.y, mce.y, atol=1e-9)
    assert mcpe.index == pytest.approx(0.0, abs=1e-9)
    phi, cv = compensating_variation(mce, tech, eps, P, TH)
    assert phi == P.Phi and cv == 0.0
    rep = welfare_report(mce, tech, eps, P, TH)
    assert rep.cv_pct == 0.0
    assert rep.dpi_pct == pytest.approx(0.0, abs=1e-9)
    assert rep.overall_pct == pytest.approx(0.0, abs=1e-9)


def test_profit_change_examples():
    th1 = ProductionParams(theta_m=1.0, theta_k=1e-9, theta_l=1e-9, rts=1.0 + 2e-9)
    tech = FirmTech.build([0.0], [0.0], [0.2], th1)
    mce = type("S", (), {"y": np.array([2.0])})()
    mcpe = type("S", (), {"y": np.array([2.3])})()
    assert profit_change(mce, mcpe, tech, th1) == pytest.approx(PROFIT_CHANGE_N1, rel=1e-12)
    assert profit_change(mce, mce, tech, th1) == 0.0


def test_welfare_signs_and_identity(tmp_path):
    tech, eps = economy(n=60, seed=7)
    mce = solve_mce(tech, eps, P, TH)
    rep = welfare_report(mce, tech, eps, P, TH)
    assert rep.cv_pct < 0 and rep.dpi_pct < 0 and rep.overall_pct > 0
    assert rep.overall_pct == rep.dpi_pct - rep.cv_pct
    # the compensating income restores the MCE utility level
    pg = P.replace(gamma=mce.index)
    sol = solve_mcpe(tech, eps, pg, TH, rep.phi_c_star, y0=mce.y)
    assert abs(utility_change(mce.y, 0.0, sol.y, sol.index, DemandShockVector(eps), pg)) < 1e-8
    write_welfare_csv(tmp_path / "w.csv", rep)
    lines = (tmp_path / "w.csv").read_text().splitlines()
    assert lines[0] == "metric,value_pct"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["cv", "profit_change", "overall"]
    assert float(lines[3].split(",")[1]) == rep.overall_pct


def test_simulated_primitives_round_trip():
    cfg = DGPConfig(n_firms=200, seed=11)
    sim = simulate_panel(cfg, 0)
    t = 3
    d = sim.panel.at(t)
    tech = FirmTech.build(d["k"], d["l"], d["omega"], cfg.theta)
    start = d["y"] + np.random.default_rng(0).normal(0, 0.05, d["y"].size)
    sol = solve_mce(tech, sim.eps[:, t - 1], cfg.demand, cfg.theta, y0=start)
    np.testing.assert_allclose(sol.y, d["y"], atol=1e-8)
    assert sol.index == pytest.approx(sim.gamma[t - 1], abs=1e-8)


def test_bad_inputs_raise():
    tech, eps = economy(n=5)
    with pytest.raises(EquilibriumError):
        solve_mce(tech, eps[:3], P, TH)
    with pytest.raises(EquilibriumError):
        solve_mce(tech, -eps - 0.1, P, TH)
