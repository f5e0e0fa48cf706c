"""Step 2: profile-likelihood estimate of the control function.

``lambda(m, u) = B(m, u)' c`` with ``B`` the tensor product of cubic
B-splines (one interior knot each). For given ``(c, rho)`` the residual
``eta`` comes from regressing ``lambda_t`` on ``k - rho k_{-1}``,
``l - rho l_{-1}`` and the lagged basis ``B(m_{-1}, u_{-1})``. The
objective is the log kernel density of ``eta`` plus the log Jacobian
``ln d lambda / d m``.

The objective is unchanged by ``c -> a c + b 1`` (a > 0), so ``c`` is pinned
down by ``mean(d lambda/dm) = 1`` and ``mean(lambda) = 0`` through a
null-space reparametrization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import null_space

from ..numerics import (
    BSplineBasis,
    NumericsError,
    SolverReport,
    basis_from_data,
    eval_basis,
    eval_basis_deriv,
    minimize_constrained,
    silverman_bandwidth,
)
from ..panel import Panel

__all__ = ["TensorBasis", "TransformFit", "Step2Error", "step2_fit", "profile_objective"]

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class Step2Error(RuntimeError):
    pass


@dataclass(frozen=True)
class TensorBasis:
    bm: BSplineBasis
    bu: BSplineBasis

    @classmethod
    def from_data(cls, m, u, degree: int = 3, n_interior: int = 1) -> "TensorBasis":
        return cls(basis_from_data(m, degree, n_interior), basis_from_data(u, degree, n_interior))

    @property
    def n_basis(self) -> int:
        return self.bm.n_basis * self.bu.n_basis

    def __call__(self, m, u) -> np.ndarray:
        Bm, Bu = eval_basis(self.bm, np.atleast_1d(m)), eval_basis(self.bu, np.atleast_1d(u))
        return (Bm[:, :, None] * Bu[:, None, :]).reshape(Bm.shape[0], -1)

    def dm(self, m, u) -> np.ndarray:
        Dm, Bu = eval_basis_deriv(self.bm, np.atleast_1d(m)), eval_basis(self.bu, np.atleast_1d(u))
        return (Dm[:, :, None] * Bu[:, None, :]).reshape(Dm.shape[0], -1)

    def identity_coeffs(self) -> np.ndarray:
        """Coefficients reproducing ``lambda(m, u) = m``."""
        return np.repeat(self.bm.greville(), self.bu.n_basis)


@dataclass
class TransformFit:
    c_t: np.ndarray
    c_tm1: np.ndarray
    rho_hat: float
    theta_k_tilde: float
    theta_l_tilde: float
    basis_t: TensorBasis
    basis_tm1: TensorBasis
    firm_ids: np.ndarray
    loglik: float
    report: SolverReport = field(default_factory=lambda: SolverReport(True, 0, 0.0, ""))
    bandwidth: float = float("nan")
    eta: Optional[np.ndarray] = None

    def lam(self, m, u):
        return self.basis_t(m, u) @ self.c_t

    def dlam_dm(self, m, u):
        return self.basis_t.dm(m, u) @ self.c_t


# --------------------------------------------------------------------------
# objective pieces
# --------------------------------------------------------------------------


def _quantile_weights(x, q):
    """Value of ``np.percentile(x, 100q)`` (linear) and its gradient in x."""
    n = x.size
    order = np.argsort(x, kind="stable")
    pos = q * (n - 1)
    lo = int(math.floor(pos))
    frac = pos - lo
    hi = min(lo + 1, n - 1)
    w = np.zeros(n)
    w[order[lo]] += 1.0 - frac
    w[order[hi]] += frac
    return float(w @ x), w


def _bandwidth_and_grad(eta):
    """Silverman bandwidth of ``eta`` and ``d h / d eta``."""
    n = eta.size
    sd = float(np.std(eta, ddof=1))
    q75, w75 = _quantile_weights(eta, 0.75)
    q25, w25 = _quantile_weights(eta, 0.25)
    iqr = (q75 - q25) / 1.34
    c = 0.9 * n ** (-0.2)
    if 0 < iqr < sd:
        return c * iqr, c * (w75 - w25) / 1.34
    if not sd > 0:
        raise Step2Error("degenerate residuals")
    return c * sd, c * (eta - eta.mean()) / ((n - 1) * sd)


def _kde_loglik(eta, with_grad: bool = True):
    """``sum_i ln g(eta_i)`` with a Silverman Gaussian KDE, and its gradient."""
    n = eta.size
    h, dh = _bandwidth_and_grad(eta)
    d = (eta[:, None] - eta[None, :]) / h
    K = np.exp(-0.5 * d * d) / _SQRT_2PI
    g = K.sum(axis=1) / (n * h)
    ll = float(np.sum(np.log(g)))
    if not with_grad:
        return ll, None, h
    # fixed-h part: d/d eta_k = (1/(n h^2)) sum_j phi'(d_kj) (1/g_k + 1/g_j)
    dK = -d * K
    inv_g = 1.0 / g
    grad = (dK * (inv_g[:, None] + inv_g[None, :])).sum(axis=1) / (n * h * h)
    # bandwidth part: d ll / d h = sum_i [-1/h + sum_j d_ij^2 K_ij / (n h^2 g_i)]
    dll_dh = float(np.sum(-1.0 / h + (d * d * K).sum(axis=1) * inv_g / (n * h * h)))
    return ll, grad + dll_dh * dh, h


@dataclass
class _Design:
    B: np.ndarray  # basis at t
    D: np.ndarray  # m-derivative of the basis at t
    k: np.ndarray
    l: np.ndarray
    k1: np.ndarray
    l1: np.ndarray
    B1: np.ndarray  # basis at t-1


def _regressors(des: _Design, rho: float):
    return np.c_[des.k - rho * des.k1, des.l - rho * des.l1, des.B1]


def _residual_parts(des: _Design, lam: np.ndarray, rho: float):
    X = _regressors(des, rho)
    Q, R = np.linalg.qr(X)
    if np.min(np.abs(np.diag(R))) < 1e-10 * np.max(np.abs(np.diag(R))):
        raise Step2Error("rank-deficient inner regression")
    coef = np.linalg.solve(R, Q.T @ lam)
    eta = lam - X @ coef
    return X, Q, R, coef, eta


def profile_objective(des: _Design, c: np.ndarray, rho: float, with_grad: bool = True):
    """Log-likelihood ``L(c, rho)`` and (optionally) its gradient."""
    lam = des.B @ c
    jac = des.D @ c
    if np.any(jac <= 0):
        return -np.inf, None
    X, Q, R, coef, eta = _residual_parts(des, lam, rho)
    ll_eta, g_eta, _ = _kde_loglik(eta, with_grad)
    ll = ll_eta + float(np.sum(np.log(jac)))
    if not with_grad:
        return ll, None
    # d eta / d c = M_X B
    MB = des.B - Q @ (Q.T @ des.B)
    grad_c = MB.T @ g_eta + des.D.T @ (1.0 / jac)
    # d eta / d rho = -M_X X' coef - X (X'X)^-1 X'^T eta, X' = dX/drho
    dX = np.zeros_like(X)
    dX[:, 0] = -des.k1
    dX[:, 1] = -des.l1
    v = dX @ coef
    Mv = v - Q @ (Q.T @ v)
    w = np.linalg.solve(R, np.linalg.solve(R.T, dX.T @ eta))
    deta_drho = -Mv - X @ w
    grad_rho = float(g_eta @ deta_drho)
    return ll, np.r_[grad_c, grad_rho]


def step2_fit(
    panel: Panel,
    t: int,
    u_hat_t: np.ndarray,
    u_hat_tm1: np.ndarray,
    firm_ids: np.ndarray,
    floor: float = 1e-3,
    rho0: float = 0.5,
    rho_bounds=(0.01, 0.999),
    max_iter: int = 500,
    tol: float = 0.1,
    ftol: float = 1e-8,
    pooled=(),
) -> TransformFit:
    """Maximize the profile likelihood over ``(c_t, rho)``.

    ``u_hat_t`` and ``u_hat_tm1`` are aligned with ``firm_ids``. ``ftol`` stops
    the optimizer; ``tol`` is the KKT residual accepted as converged. The
    IQR branch of the bandwidth rule makes the gradient piecewise, so the KKT
    residual rarely falls much below 1e-2.

    ``pooled`` holds extra ``(t_j, u_hat_tj, u_hat_tj_minus_1)`` triples on the
    same firms; their rows are stacked under a common ``(c, rho)``.
    """
    frames = [(t, u_hat_t, u_hat_tm1)] + list(pooled)
    cur, lag = {}, {}
    for tj, _, _ in frames:
        data = panel.aligned(tj, lags=(0, 1), firm_ids=firm_ids)
        for key in ("m", "k", "l"):
            cur.setdefault(key, []).append(data[0][key])
            lag.setdefault(key, []).append(data[1][key])
    cur = {k: np.concatenate(v) for k, v in cur.items()}
    lag = {k: np.concatenate(v) for k, v in lag.items()}
    u_hat_t = np.concatenate([np.asarray(f[1], dtype=float) for f in frames])
    u_hat_tm1 = np.concatenate([np.asarray(f[2], dtype=float) for f in frames])
    n = cur["m"].size
    if n < 30:
        raise Step2Error("too few firms for step 2")
    bt = TensorBasis.from_data(cur["m"], u_hat_t)
    bt1 = TensorBasis.from_data(lag["m"], u_hat_tm1)
    des = _Design(
        B=bt(cur["m"], u_hat_t), D=bt.dm(cur["m"], u_hat_t),
        k=cur["k"], l=cur["l"], k1=lag["k"], l1=lag["l"], B1=bt1(lag["m"], u_hat_tm1),
    )
    p = bt.n_basis
    # normalization: mean(D c) = 1, mean(B c) = 0  ->  c = c0 + N z
    C = np.vstack([des.D.mean(axis=0), des.B.mean(axis=0)])
    c0 = bt.identity_coeffs() - float(np.mean(cur["m"]))
    N = null_space(C)
    if not np.allclose(C @ c0, [1.0, 0.0], atol=1e-8):
        raise Step2Error("identity start violates the normalization")

    def unpack(x):
        return c0 + N @ x[:-1], float(x[-1])

    # SLSQP asks for f and grad at the same points; evaluate both once
    cache = {}

    def evaluate(x):
        key = x.tobytes()
        if key not in cache:
            cache.clear()
            c, rho = unpack(x)
            ll, g = profile_objective(des, c, rho)
            if g is None or not np.isfinite(ll):
                cache[key] = (1e10, np.zeros_like(x))
            else:
                cache[key] = (-ll / n, -np.r_[N.T @ g[:-1], g[-1]] / n)
        return cache[key]

    def objective(x):
        return evaluate(x)[0]

    def gradient(x):
        return evaluate(x)[1]

    # constraints: D (c0 + N z) >= floor, rho within bounds
    A = np.zeros((n + 2, N.shape[1] + 1))
    A[:n, :-1] = des.D @ N
    A[n, -1] = 1.0
    A[n + 1, -1] = -1.0
    cvec = np.r_[floor - des.D @ c0, rho_bounds[0], -rho_bounds[1]]
    x0 = np.r_[np.zeros(N.shape[1]), rho0]
    try:
        x, rep = minimize_constrained(objective, gradient, (A, cvec), x0, tol=tol, max_iter=max_iter, ftol=ftol)
    except NumericsError as exc:
        raise Step2Error(str(exc)) from exc
    c, rho = unpack(x)
    lam = des.B @ c
    X, Q, R, coef, eta = _residual_parts(des, lam, rho)
    ll, _ = profile_objective(des, c, rho, with_grad=False)
    return TransformFit(
        c_t=c, c_tm1=coef[2:] / rho, rho_hat=rho, theta_k_tilde=float(coef[0]), theta_l_tilde=float(coef[1]),
        basis_t=bt, basis_tm1=bt1, firm_ids=np.asarray(firm_ids), loglik=ll, report=rep,
        bandwidth=silverman_bandwidth(eta), eta=eta,
    )
