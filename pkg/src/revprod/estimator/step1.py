"""Step 1: smoothed-GMM IV quantile regression of revenue on materials.

The revenue quantile function is approximated by

    phi(m, tau) = sum_j B_j(m) (A_j0 + A_j1 tau + A_j2 tau^2) + a3 tau^3

where ``B`` is a cubic B-spline basis in ``m``. Because the B-splines sum to
one, this spans the same functions as a constant, the spline in ``m``, a cubic
in ``tau`` and the spline interacted with ``tau`` and ``tau^2``; the redundant
columns are dropped so the design has full rank.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize

from ..numerics import (
    BSplineBasis,
    NumericsError,
    SolverReport,
    basis_from_data,
    brent_root,
    eval_basis,
    eval_basis_deriv,
    horowitz_cdf,
    horowitz_pdf,
    minimize_constrained,
)
from ..panel import Panel

__all__ = ["IVQRFit", "Step1Error", "quantile_grid", "step1_fit", "step1_invert", "step1_invert_many"]

U_LO, U_HI = 1e-6, 1.0 - 1e-6


class Step1Error(RuntimeError):
    pass


def quantile_grid(L: int = 100) -> np.ndarray:
    return np.arange(1, L) / L


@dataclass
class IVQRFit:
    alpha: np.ndarray
    basis_m: BSplineBasis
    quantile_grid: np.ndarray
    bandwidth: float
    instrument_basis: BSplineBasis
    report: SolverReport = field(default_factory=lambda: SolverReport(True, 0, 0.0, ""))
    objective: float = float("nan")
    period: Optional[int] = None
    constraint_floor: float = 0.0

    @property
    def A(self) -> np.ndarray:
        return self.alpha[:-1].reshape(self.basis_m.n_basis, 3)

    @property
    def a3(self) -> float:
        return float(self.alpha[-1])

    def poly_coeffs(self, m):
        """Cubic-in-u coefficients ``(c0, c1, c2, c3)`` of phi at each ``m``."""
        C = np.atleast_2d(eval_basis(self.basis_m, np.atleast_1d(m))) @ self.A
        return C[:, 0], C[:, 1], C[:, 2], np.full(C.shape[0], self.a3)

    def phi(self, m, u):
        c0, c1, c2, c3 = self.poly_coeffs(m)
        u = np.asarray(u, dtype=float)
        return c0 + u * (c1 + u * (c2 + u * c3))

    def dphi_dm(self, m, u):
        D = np.atleast_2d(eval_basis_deriv(self.basis_m, np.atleast_1d(m))) @ self.A
        u = np.asarray(u, dtype=float)
        return D[:, 0] + u * (D[:, 1] + u * D[:, 2])

    def dphi_du(self, m, u):
        _, c1, c2, c3 = self.poly_coeffs(m)
        u = np.asarray(u, dtype=float)
        return c1 + u * (2.0 * c2 + 3.0 * u * c3)


def _constraint_rows(basis_m: BSplineBasis, m_grid, tau_grid):
    """Rows ``R`` with ``R @ alpha`` = d phi/dm and d phi/du on the grid."""
    Bm = eval_basis(basis_m, m_grid)
    Dm = eval_basis_deriv(basis_m, m_grid)
    rows = []
    for tau in tau_grid:
        P = np.array([1.0, tau, tau * tau])
        rows.append(np.c_[(Dm[:, :, None] * P).reshape(len(m_grid), -1), np.zeros(len(m_grid))])
        dP = np.array([0.0, 1.0, 2.0 * tau])
        rows.append(np.c_[(Bm[:, :, None] * dP).reshape(len(m_grid), -1), np.full(len(m_grid), 3.0 * tau * tau)])
    return np.vstack(rows)


def _per_tau_quantile_fit(Bm, r, taus):
    """Unsmoothed linear quantile regression of r on the m-basis, per tau.

    Solved through the bounded dual LP; coefficients are the equality
    multipliers.
    """
    p = Bm.shape[1]
    out = np.empty((len(taus), p))
    colsum = Bm.sum(axis=0)
    # the basis sums to one, so centering r only shifts every coefficient
    shift = float(np.median(r))
    rc = r - shift
    for i, tau in enumerate(taus):
        for method in ("highs", "highs-ipm"):
            res = optimize.linprog(-rc, A_eq=Bm.T, b_eq=(1.0 - tau) * colsum, bounds=(0.0, 1.0), method=method)
            if res.status == 0:
                break
        else:
            raise Step1Error(f"start-value quantile regression failed at tau={tau}: {res.message}")
        out[i] = shift - res.eqlin.marginals
    return out


def _stack_coeff_paths(paths, taus):
    """LS fit of per-tau coefficient paths to the polynomial-in-tau structure."""
    L, p = paths.shape
    P = np.c_[np.ones(L), taus, taus**2]
    # unknowns: A (p x 3) row-major then a3; path_j(tau) = P A_j + a3 tau^3
    X = np.zeros((L * p, 3 * p + 1))
    for j in range(p):
        X[j::p, 3 * j : 3 * j + 3] = P
    X[:, -1] = np.repeat(taus**3, p)
    coef, *_ = np.linalg.lstsq(X, paths.ravel(), rcond=None)
    return coef


def _feasible_anchor(basis_m: BSplineBasis, r, m):
    """A strictly monotone phi: m + const + slope * u."""
    p = basis_m.n_basis
    A = np.zeros((p, 3))
    slope = max(float(np.std(r - m)), 1e-3) * 2.0
    A[:, 0] = basis_m.greville() + float(np.mean(r - m)) - 0.5 * slope
    A[:, 1] = slope
    return np.r_[A.ravel(), 0.0]


def step1_fit(
    panel: Panel,
    t: int,
    L: int = 100,
    bandwidth: Optional[float] = None,
    weight: str = "optimal",
    floor: float = 1e-4,
    n_m_grid: int = 20,
    n_tau_grid: int = 21,
    firm_ids=None,
    max_iter: int = 500,
) -> IVQRFit:
    """Fit the monotone revenue quantile function of period ``t``.

    Instruments are a cubic B-spline basis (2 interior knots) in ``m_{t-2}``.
    ``weight`` is ``"optimal"`` (inverse of the quantile-indicator covariance
    kron the instrument second moment) or ``"identity"``.
    """
    data = panel.aligned(t, lags=(0, 2), firm_ids=firm_ids)
    r, m, m2 = data[0]["r"], data[0]["m"], data[2]["m"]
    n = r.size
    if n < 20:
        raise Step1Error("too few firms for step 1")
    taus = quantile_grid(L)
    basis_m = basis_from_data(m, 3, 2)
    basis_iv = basis_from_data(m2, 3, 2)
    Bm = eval_basis(basis_m, m)
    Z = eval_basis(basis_iv, m2)
    S = Z.T @ Z / n
    if np.linalg.matrix_rank(S) < S.shape[0]:
        raise Step1Error("rank-deficient instrument design")
    b = float(bandwidth) if bandwidth is not None else 1.06 * float(np.std(r, ddof=1)) * n ** (-0.2)
    if weight == "optimal":
        Sig = np.minimum.outer(taus, taus) - np.outer(taus, taus)
        Sig_inv = np.linalg.inv(Sig)
        S_inv = np.linalg.inv(S)
    elif weight == "identity":
        Sig_inv = np.eye(L - 1)
        S_inv = np.eye(S.shape[0])
    else:
        raise ValueError(f"unknown weight {weight!r}")
    P = np.c_[np.ones(L - 1), taus, taus**2]  # (L-1) x 3
    tau3 = taus**3
    p = basis_m.n_basis

    def parts(alpha):
        A = alpha[:-1].reshape(p, 3)
        Phi = Bm @ A @ P.T + alpha[-1] * tau3  # n x (L-1)
        e = (Phi - r[:, None]) / b
        G = (horowitz_cdf(e) - taus).T @ Z / n  # (L-1) x q
        return e, G

    # minimized per observation; J_n = n * objective
    def objective(alpha):
        _, G = parts(alpha)
        return float(np.sum((Sig_inv @ G @ S_inv) * G))

    def gradient(alpha):
        e, G = parts(alpha)
        H = Sig_inv @ G @ S_inv
        M = horowitz_pdf(e) / (b * n) * (Z @ H.T)  # n x (L-1)
        gA = 2.0 * Bm.T @ M @ P
        ga3 = 2.0 * float(np.sum(M @ tau3))
        return np.r_[gA.ravel(), ga3]

    m_grid = np.quantile(m, np.linspace(0.0, 1.0, n_m_grid))
    tau_grid = np.linspace(0.0, 1.0, n_tau_grid)
    R = _constraint_rows(basis_m, m_grid, tau_grid)
    c = np.full(R.shape[0], floor)

    # start: stacked per-tau quantile fits, pulled toward a feasible anchor
    start = _stack_coeff_paths(_per_tau_quantile_fit(Bm, r, taus), taus)
    anchor = _feasible_anchor(basis_m, r, m)
    x0 = None
    for lam in np.linspace(0.0, 1.0, 21):
        cand = (1.0 - lam) * start + lam * anchor
        if np.all(R @ cand > c):
            x0 = cand
            break
    if x0 is None:
        raise Step1Error("could not build a strictly feasible start")
    # SLSQP is not monotone; keep the best of the blended start and the anchor
    f0 = objective(x0)
    best = None
    for start_pt in (x0, anchor):
        if not np.all(R @ start_pt > c):
            continue
        try:
            alpha, rep = minimize_constrained(objective, gradient, (R, c), start_pt, tol=1e-6, max_iter=max_iter)
        except NumericsError:
            continue
        if np.any(R @ alpha < c - 1e-8):
            continue
        f = objective(alpha)
        if best is None or f < best[0]:
            best = (f, alpha, rep)
        if f <= f0:
            break
    if best is None:
        raise Step1Error("optimizer failed from every start")
    f, alpha, rep = best
    if f > f0:
        raise Step1Error("optimizer ended above the start objective")
    return IVQRFit(
        alpha=alpha, basis_m=basis_m, quantile_grid=taus, bandwidth=b, instrument_basis=basis_iv,
        report=rep, objective=n * f, period=t, constraint_floor=floor,
    )


def step1_invert(fit: IVQRFit, m: float, r: float) -> float:
    """Demand rank solving ``phi(m, u) = r``, clamped to [1e-6, 1 - 1e-6]."""
    c0, c1, c2, c3 = (float(v[0]) for v in fit.poly_coeffs(np.atleast_1d(m)))

    def f(u):
        return c0 + u * (c1 + u * (c2 + u * c3)) - r

    f0, f1 = f(0.0), f(1.0)
    if f0 >= 0:
        return U_LO
    if f1 <= 0:
        return U_HI
    u = brent_root(f, 0.0, 1.0, tol=1e-12)
    return min(max(u, U_LO), U_HI)


def step1_invert_many(fit: IVQRFit, m, r):
    """Vector version of :func:`step1_invert`; returns ``(u_hat, clamped)``."""
    m = np.atleast_1d(np.asarray(m, dtype=float))
    r = np.atleast_1d(np.asarray(r, dtype=float))
    u = np.array([step1_invert(fit, mi, ri) for mi, ri in zip(m, r)])
    clamped = (u <= U_LO) | (u >= U_HI)
    return u, clamped
