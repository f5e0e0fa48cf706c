import math

import numpy as np
import pytest
from scipy.special import logsumexp
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from revprod.demand import (
    DemandError,
    DemandShockVector,
    HSADemandParams,
    ces_delta_q,
    ces_log_utility,
    copath_upsilon,
    hdia_delta_a,
    hdia_delta_b,
    hiia_delta_a,
    hiia_delta_b,
    invert_revenue,
    log_share,
    log_share_deriv,
    markup,
    reduced_revenue,
    solve_delta_q,
    utility_change,
)

# frozen from tests/oracles/derive.py
LOG_SHARE_Y10 = -3.0721295176592756945
REDUCED_REVENUE_Y13 = 19.00989299830448752
CES_DQ_HOMOG = 0.38629436111989061883
CES_DQ_HET = 0.37087981724457065689
UTILITY_CHANGE_EXP = 0.069065597081840947774
UTILITY_CHANGE_EXP_DQ = (-1.1628527265502292378, -1.0937871294683882901)
UTILITY_CHANGE_EXP_OFFEQ = -0.17374250480580762232
HDIA_DA_EXP = 0.28591955720998029118
HDIA_DB_EXP = 1.4410084538329922053

P = HSADemandParams(Phi=20.0, delta=-6.5, beta=0.21, gamma=1.0)

params = st.builds(
    HSADemandParams,
    Phi=st.floats(-5, 25),
    delta=st.floats(-8, 0),
    beta=st.floats(0.02, 1.5),
    gamma=st.floats(-3, 3),
)


def test_params_validation():
    with pytest.raises(DemandError):
        HSADemandParams(Phi=0, delta=0, beta=0.0)
    with pytest.raises(DemandError):
        DemandShockVector(eps=[0.1, -0.2])
    with pytest.raises(DemandError):
        DemandShockVector(eps=[0.1], u=[1.5])
    assert P.replace(beta=0.5).beta == 0.5 and P.replace(beta=0.5).Phi == 20.0


# -- log share and revenue -----------------------------------------------------


def test_log_share_competitive_limit():
    y = np.linspace(-3, 3, 7)
    np.testing.assert_allclose(log_share(y, 0.0, P), P.delta + y - P.gamma / P.beta, atol=1e-12)


def test_log_share_cancellation_point():
    y = P.gamma / P.beta
    for e in (0.0, 0.3, 7.0):
        assert log_share(y, e, P) == pytest.approx(P.delta, abs=1e-13)


def test_log_share_high_precision_value():
    assert log_share(10.0, 0.3, P.replace(Phi=0.0)) == pytest.approx(LOG_SHARE_Y10, abs=1e-13)


def test_reduced_revenue_examples():
    y = np.linspace(0, 15, 6)
    np.testing.assert_allclose(reduced_revenue(y, 0.0, P), P.Phi + P.delta + y - P.gamma / P.beta, atol=1e-12)
    np.testing.assert_allclose(reduced_revenue(y, 0.4, P.replace(Phi=21.0)), reduced_revenue(y, 0.4, P) + 1, atol=1e-12)
    assert reduced_revenue(13.0, 0.2, P) == pytest.approx(REDUCED_REVENUE_Y13, abs=1e-12)


def test_markup_examples():
    assert markup(4.0, 0.0, P) == 1.0
    assert markup(P.gamma / P.beta, 0.35, P) == pytest.approx(1.35, abs=1e-14)


def test_log_share_is_stable_for_large_arguments():
    # far beyond the overflow point of exp(-beta*y + gamma)
    v = log_share(-4000.0, 0.5, P)
    assert math.isfinite(v)
    assert v == pytest.approx(P.delta - (-P.beta * -4000.0 + P.gamma - math.log(1.5)) / P.beta, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(params, st.integers(0, 2**31 - 1))
def test_revenue_slope_in_unit_interval_and_reciprocal_to_markup(p, seed):
    rng = np.random.default_rng(seed)
    # keep beta*y - gamma where the markup is representable
    y = (rng.uniform(-8, 4, 1000) + p.gamma) / p.beta
    eps = rng.uniform(0.01, 2.0, 1000)
    h = 1e-6
    slope = (reduced_revenue(y + h, eps, p) - reduced_revenue(y - h, eps, p)) / (2 * h)
    assert np.all(slope > 0) and np.all(slope < 1)
    np.testing.assert_allclose(markup(y, eps, p) * slope, 1.0, atol=1e-6)
    np.testing.assert_allclose(log_share_deriv(y, eps, p), 1 / markup(y, eps, p))
    assert np.all(markup(y, eps, p) > 1.0)


@settings(max_examples=60, deadline=None)
@given(params, st.integers(0, 2**31 - 1))
def test_invert_revenue_round_trip(p, seed):
    rng = np.random.default_rng(seed)
    # the inverse loses digits in proportion to the markup; keep it moderate
    y = (rng.uniform(-8, 4, 1000) + p.gamma) / p.beta
    eps = rng.uniform(0.0, 2.0, 1000)
    np.testing.assert_allclose(invert_revenue(reduced_revenue(y, eps, p), eps, p), y, atol=1e-10)


def test_invert_revenue_linear_case_and_domain():
    r = np.array([10.0, 13.0])
    np.testing.assert_allclose(invert_revenue(r, 0.0, P), r - P.Phi - P.delta + P.gamma / P.beta, atol=1e-12)
    with pytest.raises(DemandError):
        invert_revenue(P.Phi + P.delta + 500.0, 0.5, P)


def test_ces_limit_of_small_beta():
    # beta -> 0 with gamma = 0: r -> Phi + delta + y / (1 + eps)
    p = HSADemandParams(Phi=20.0, delta=-6.5, beta=1e-6, gamma=0.0)
    y, eps = np.meshgrid(np.linspace(-10, 10, 21), np.linspace(0, 2, 11))
    assert np.max(np.abs(reduced_revenue(y, eps, p) - (p.Phi + p.delta + y / (1 + eps)))) < 1e-4


# -- quantity index --------------------------------------------------------------


def test_delta_q_closed_form_without_shocks():
    y = np.array([0.3, -1.0, 2.2, 0.7])
    dq = solve_delta_q(y, DemandShockVector(np.zeros(4)), P)
    assert dq == pytest.approx(math.log(np.sum(np.exp(y + P.delta - P.gamma / P.beta))), abs=1e-10)


def test_delta_q_single_firm_has_unit_share():
    s = DemandShockVector(np.array([0.01]))
    y = np.array([3.0])
    dq = solve_delta_q(y, s, P)
    assert log_share(y - dq, s.eps, P)[0] == pytest.approx(0.0, abs=1e-12)


def test_delta_q_unattainable_share_raises():
    # shares are bounded by exp(delta) ((1 + eps) / eps)^(1/beta); here below one
    with pytest.raises(DemandError):
        solve_delta_q(np.array([3.0]), DemandShockVector(np.array([0.4])), P)


@settings(max_examples=50, deadline=None)
@given(params, st.integers(0, 2**31 - 1), st.floats(-5, 5))
def test_delta_q_shares_and_homogeneity(p, seed, c):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 40))
    y = rng.normal(5, 2, n)
    s = DemandShockVector(rng.uniform(0, 1.5, n))
    with np.errstate(divide="ignore"):
        sup = p.delta + np.log((1 + s.eps) / s.eps) / p.beta
    assume(logsumexp(sup) > 0.01)
    dq = solve_delta_q(y, s, p)
    assert np.sum(np.exp(log_share(y - dq, s.eps, p))) == pytest.approx(1.0, abs=1e-10)
    assert solve_delta_q(y + c, s, p) == pytest.approx(dq + c, abs=1e-9)


# -- utility ---------------------------------------------------------------------


def test_utility_change_identical_states():
    s = DemandShockVector(np.array([0.1, 0.3]))
    y = np.array([1.0, 2.0])
    assert utility_change(y, 0.2, y, 0.2, s, P) == 0.0


def test_utility_change_exponential_oracle():
    p = HSADemandParams(Phi=0.0, delta=-1.2, beta=0.3, gamma=0.4)
    s = DemandShockVector(np.zeros(3))
    y0 = np.array([0.1, -0.5, 0.8])
    y1 = np.array([0.4, -0.1, 0.6])
    d0, d1 = solve_delta_q(y0, s, p), solve_delta_q(y1, s, p)
    np.testing.assert_allclose([d0, d1], UTILITY_CHANGE_EXP_DQ, atol=1e-12)
    assert utility_change(y0, d0, y1, d1, s, p) == pytest.approx(UTILITY_CHANGE_EXP, abs=1e-10)
    assert utility_change(y0, 0.1, y1, -0.2, s, p) == pytest.approx(UTILITY_CHANGE_EXP_OFFEQ, abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(params, st.integers(0, 2**31 - 1), st.floats(-3, 3))
def test_utility_antisymmetry_and_location_invariance(p, seed, a):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    s = DemandShockVector(rng.uniform(0, 1.0, n))
    with np.errstate(divide="ignore"):
        sup = p.delta + np.log((1 + s.eps) / s.eps) / p.beta
    assume(logsumexp(sup) > 0.01)
    y0 = rng.normal(5, 1, n)
    y1 = y0 + rng.normal(0, 0.3, n)
    d0, d1 = solve_delta_q(y0, s, p), solve_delta_q(y1, s, p)
    fwd = utility_change(y0, d0, y1, d1, s, p)
    assert utility_change(y1, d1, y0, d0, s, p) == pytest.approx(-fwd, abs=1e-9)
    # shifting both states by a leaves the change intact
    e0, e1 = solve_delta_q(y0 + a, s, p), solve_delta_q(y1 + a, s, p)
    assert utility_change(y0 + a, e0, y1 + a, e1, s, p) == pytest.approx(fwd, abs=1e-8)
    # shifting one state moves its level by a
    assert utility_change(y0, d0, y0 + a, e0, s, p) == pytest.approx(a, abs=1e-8)


def test_utility_change_length_mismatch():
    with pytest.raises(DemandError):
        utility_change(np.zeros(2), 0.0, np.zeros(3), 0.0, DemandShockVector(np.zeros(2)), P)


# -- generalized CES -------------------------------------------------------------


def test_ces_delta_q_examples():
    assert ces_delta_q([0.0, 0.0], [1.0, 1.0], [0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-13)
    assert ces_delta_q([1.0, 1.0], [0.5, 0.5], [-1.0, -1.0]) == pytest.approx(CES_DQ_HOMOG, abs=1e-12)
    assert ces_delta_q([0.3, -0.4], [0.8, 0.5], [-0.2, -1.1]) == pytest.approx(CES_DQ_HET, abs=1e-12)
    with pytest.raises(DemandError):
        ces_delta_q([0.0], [0.0], [0.0])


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 1.0), st.integers(0, 2**31 - 1))
def test_ces_homogeneous_closed_form_and_utility(rho, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 20))
    y, d = rng.normal(0, 1, n), rng.normal(-2, 0.5, n)
    r = np.full(n, rho)
    dq = ces_delta_q(y, r, d)
    assert dq == pytest.approx(math.log(np.sum(np.exp(rho * y + d))) / rho, abs=1e-10)
    assert ces_log_utility(y, r, d, dq) == pytest.approx(dq + 1 / rho, abs=1e-10)
    dq2 = ces_delta_q(y + math.log(2), r, d)
    assert ces_log_utility(y + math.log(2), r, d, dq2) == pytest.approx(ces_log_utility(y, r, d, dq) + math.log(2), abs=1e-9)


def test_ces_utility_matches_general_quadrature():
    # heterogeneous CES written as a reduced share upsilon_i(z) = rho_i z + delta_i
    y0, y1 = np.array([0.3, -0.4]), np.array([0.5, -0.1])
    rho, d = np.array([0.8, 0.5]), np.array([-0.2, -1.1])
    q0, q1 = ces_delta_q(y0, rho, d), ces_delta_q(y1, rho, d)
    direct = ces_log_utility(y1, rho, d, q1) - ces_log_utility(y0, rho, d, q0)
    integ = sum(
        (math.exp(rho[i] * (y1[i] - q1) + d[i]) - math.exp(rho[i] * (y0[i] - q0) + d[i])) / rho[i]
        for i in range(2)
    )
    from revprod.numerics import quad_adaptive

    quad = sum(
        quad_adaptive(lambda z, i=i: np.exp(rho[i] * z + d[i]), y0[i] - q0, y1[i] - q1, tol=1e-12) for i in range(2)
    )
    assert quad == pytest.approx(integ, abs=1e-12)
    assert direct == pytest.approx((q1 - q0) + quad, abs=1e-8)


# -- HDIA / HIIA -----------------------------------------------------------------


def exp_upsilon(a):
    return lambda z, i: a[i] + z


def test_hdia_identity_and_uniform_shift():
    s = DemandShockVector(np.array([0.2, 0.5, 0.1]))
    ups = copath_upsilon(P.replace(Phi=0.0), s)
    yb = np.array([1.0, 2.0, -0.5])
    assert hdia_delta_a(yb, yb, s, ups) == 0.0
    assert hdia_delta_a(yb, yb + 0.7, s, ups) == pytest.approx(0.7, abs=1e-10)
    yn = yb + np.array([0.3, -0.2, 0.1])
    da = hdia_delta_a(yb, yn, s, ups)
    assert abs(da) < 0.3


def test_hdia_exponential_oracle():
    ups = exp_upsilon([0.2, -0.6])
    s = DemandShockVector(np.zeros(2))
    da = hdia_delta_a([1.0, 0.5], [1.4, 0.2], s, ups)
    assert da == pytest.approx(HDIA_DA_EXP, abs=1e-10)
    assert hdia_delta_b([1.4, 0.2], da, s, ups) == pytest.approx(HDIA_DB_EXP, abs=1e-9)


def test_hdia_delta_b_trivial_cases():
    zero = lambda z, i: 0.0
    assert hdia_delta_b([0.3], 0.1, None, zero) == 0.0
    assert hdia_delta_b([0.3, 2.0], 0.1, None, zero) == pytest.approx(math.log(2), abs=1e-15)


def test_hiia_mirrors_hdia():
    ups = exp_upsilon([0.2, -0.6])
    s = DemandShockVector(np.zeros(2))
    pb = np.array([1.0, 0.5])
    assert hiia_delta_a(pb, pb, s, ups) == 0.0
    assert hiia_delta_a(pb, pb + 0.7, s, ups) == pytest.approx(0.7, abs=1e-10)
    da = hiia_delta_a(pb, [1.4, 0.2], s, ups)
    assert da == pytest.approx(HDIA_DA_EXP, abs=1e-10)
    assert hiia_delta_b([1.4, 0.2], da, s, ups) == pytest.approx(HDIA_DB_EXP, abs=1e-9)
