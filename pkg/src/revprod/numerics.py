"""Numerical kernels shared by the simulator, estimator and equilibrium code.

B-spline bases (Cox-de Boor), the Horowitz smoothed-indicator kernel,
Silverman bandwidths and Gaussian KDE, scalar root finding, damped Newton
for square systems, adaptive Gauss-Kronrod quadrature and a thin
linear-inequality-constrained minimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize

__all__ = [
    "NumericsError",
    "BSplineBasis",
    "SolverReport",
    "basis_from_data",
    "eval_basis",
    "eval_basis_deriv",
    "horowitz_cdf",
    "horowitz_pdf",
    "silverman_bandwidth",
    "kde_gaussian",
    "brent_root",
    "newton_system",
    "quad_adaptive",
    "minimize_constrained",
]


class NumericsError(RuntimeError):
    """Raised when a numerical kernel cannot satisfy its contract."""


# --------------------------------------------------------------------------
# B-splines
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BSplineBasis:
    """Clamped B-spline basis on ``[lo, hi]``.

    The full knot vector repeats each boundary ``degree + 1`` times, so the
    first basis function equals one at ``lo`` and the last equals one at
    ``hi``.
    """

    degree: int
    interior_knots: tuple[float, ...]
    lo: float
    hi: float
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.degree < 0:
            raise NumericsError("degree must be non-negative")
        if not self.lo < self.hi:
            raise NumericsError(f"degenerate boundary [{self.lo}, {self.hi}]")
        inner = tuple(float(v) for v in self.interior_knots)
        if any(not (self.lo < v < self.hi) for v in inner):
            raise NumericsError("interior knots must lie strictly inside the boundary")
        if any(b <= a for a, b in zip(inner, inner[1:])):
            raise NumericsError("interior knots must be strictly increasing")
        object.__setattr__(self, "interior_knots", inner)
        t = np.r_[[self.lo] * (self.degree + 1), inner, [self.hi] * (self.degree + 1)]
        object.__setattr__(self, "knots", t.astype(float))

    @property
    def n_basis(self) -> int:
        return self.degree + 1 + len(self.interior_knots)

    def greville(self) -> np.ndarray:
        """Greville abscissae; ``sum_j g_j B_j(x) == x`` for degree >= 1."""
        p, t = self.degree, self.knots
        if p == 0:
            return 0.5 * (t[:-1] + t[1:])
        return np.array([t[j + 1 : j + p + 1].mean() for j in range(self.n_basis)])

    def __call__(self, x) -> np.ndarray:
        return eval_basis(self, x)

    def deriv(self, x) -> np.ndarray:
        return eval_basis_deriv(self, x)


def basis_from_data(x, degree: int, n_interior: int) -> BSplineBasis:
    """Basis with interior knots at equal-mass sample quantiles.

    Boundaries are the sample extremes pushed out by ``1e-6 * range``.
    """
    x = np.asarray(x, dtype=float)
    lo, hi = float(x.min()), float(x.max())
    span = hi - lo
    if not span > 0:
        raise NumericsError("cannot build a basis on a constant regressor")
    probs = np.arange(1, n_interior + 1) / (n_interior + 1)
    inner = np.quantile(x, probs) if n_interior else np.empty(0)
    return BSplineBasis(degree, tuple(inner), lo - 1e-6 * span, hi + 1e-6 * span)


def _degree_table(basis: BSplineBasis, x: np.ndarray, upto: int) -> np.ndarray:
    """Cox-de Boor values of all order-``upto`` B-splines at ``x``."""
    t = basis.knots
    n_int = len(t) - 1
    # degree-0 indicators; x == hi goes to the last non-empty span
    B = np.zeros((x.size, n_int))
    last = max(j for j in range(n_int) if t[j] < t[j + 1])
    for j in range(n_int):
        if t[j] < t[j + 1]:
            B[:, j] = (x >= t[j]) & (x < t[j + 1])
    B[x >= t[last + 1], last] = 1.0
    for p in range(1, upto + 1):
        nb = n_int - p
        out = np.zeros((x.size, nb))
        for j in range(nb):
            d1 = t[j + p] - t[j]
            d2 = t[j + p + 1] - t[j + 1]
            if d1 > 0:
                out[:, j] += (x - t[j]) / d1 * B[:, j]
            if d2 > 0:
                out[:, j] += (t[j + p + 1] - x) / d2 * B[:, j + 1]
        B = out
    return B


def _as_points(basis: BSplineBasis, x):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NumericsError("basis evaluated at a non-finite point")
    return arr.ndim == 0, np.clip(arr.ravel(), basis.lo, basis.hi)


def eval_basis(basis: BSplineBasis, x) -> np.ndarray:
    """Basis weights at ``x`` (scalar -> vector, array -> rows per point)."""
    scalar, pts = _as_points(basis, x)
    B = _degree_table(basis, pts, basis.degree)
    return B[0] if scalar else B


def eval_basis_deriv(basis: BSplineBasis, x) -> np.ndarray:
    """First derivative of every basis function at ``x``."""
    scalar, pts = _as_points(basis, x)
    p, t = basis.degree, basis.knots
    if p == 0:
        D = np.zeros((pts.size, basis.n_basis))
    else:
        lower = _degree_table(basis, pts, p - 1)
        D = np.zeros((pts.size, basis.n_basis))
        for j in range(basis.n_basis):
            d1 = t[j + p] - t[j]
            d2 = t[j + p + 1] - t[j + 1]
            if d1 > 0:
                D[:, j] += p / d1 * lower[:, j]
            if d2 > 0:
                D[:, j] -= p / d2 * lower[:, j + 1]
    return D[0] if scalar else D


# --------------------------------------------------------------------------
# kernels and density estimation
# --------------------------------------------------------------------------


def _horowitz_raw(c):
    c2 = c * c
    poly = c * (1.0 - c2 * (5.0 / 3.0 - c2 * (7.0 / 5.0 - c2 * 3.0 / 7.0)))
    return 0.5 + 105.0 / 64.0 * poly


# the raw polynomial first reaches 1 here and stays at or above 1 up to |s| = 1
_HOROWITZ_CUT = float(optimize.brentq(lambda c: _horowitz_raw(c) - 1.0, 0.1, 1.0 / math.sqrt(3.0), xtol=1e-15))


def horowitz_cdf(s):
    """Integrated fourth-order kernel used to smooth quantile indicators.

    The raw polynomial overshoots to about 1.053 near ``|s| = 1/sqrt(3)``
    before returning to 1 at ``|s| = 1``. It is cut where it first reaches 0
    or 1 (``|s|`` about 0.394), which keeps it monotone with the same
    endpoints.
    """
    s = np.asarray(s, dtype=float)
    inner = np.clip(_horowitz_raw(np.clip(s, -_HOROWITZ_CUT, _HOROWITZ_CUT)), 0.0, 1.0)
    out = np.where(s >= _HOROWITZ_CUT, 1.0, np.where(s <= -_HOROWITZ_CUT, 0.0, inner))
    return out[()] if out.ndim == 0 else out


def horowitz_pdf(s):
    """Derivative of :func:`horowitz_cdf` (zero beyond the cut)."""
    s = np.asarray(s, dtype=float)
    s2 = s * s
    val = 105.0 / 64.0 * (1.0 - 5.0 * s2 + 7.0 * s2 * s2 - 3.0 * s2 * s2 * s2)
    out = np.where(np.abs(s) < _HOROWITZ_CUT, val, 0.0)
    return out[()] if out.ndim == 0 else out


def silverman_bandwidth(values) -> float:
    """``0.9 * min(sd, IQR/1.34) * n**(-1/5)``.

    When the IQR collapses but the standard deviation does not, the standard
    deviation alone is used.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size < 2:
        raise NumericsError("bandwidth needs at least two values")
    sd = float(np.std(v, ddof=1))
    q1, q3 = np.percentile(v, [25.0, 75.0])
    iqr = float(q3 - q1) / 1.34
    spread = min(sd, iqr) if iqr > 0 else sd
    if not spread > 0:
        raise NumericsError("zero dispersion: bandwidth undefined")
    return 0.9 * spread * v.size ** (-0.2)


_SQRT_2PI = math.sqrt(2.0 * math.pi)


def kde_gaussian(points, bandwidth: float, x):
    """Gaussian kernel density of ``points`` evaluated at ``x``."""
    if not bandwidth > 0:
        raise NumericsError("bandwidth must be positive")
    pts = np.asarray(points, dtype=float).ravel()
    xa = np.asarray(x, dtype=float)
    z = (xa.reshape(-1, 1) - pts[None, :]) / bandwidth
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (pts.size * bandwidth * _SQRT_2PI)
    return float(dens[0]) if xa.ndim == 0 else dens.reshape(xa.shape)


# --------------------------------------------------------------------------
# solvers
# --------------------------------------------------------------------------


@dataclass
class SolverReport:
    converged: bool
    iterations: int
    residual_norm: float
    message: str = ""


def brent_root(f: Callable[[float], float], a: float, b: float, tol: float = 1e-12) -> float:
    """Root of ``f`` in ``[a, b]``; the bracket must change sign."""
    fa, fb = f(a), f(b)
    if fa == 0.0:
        return float(a)
    if fb == 0.0:
        return float(b)
    if np.sign(fa) == np.sign(fb):
        raise NumericsError(f"no sign change on [{a}, {b}]: f(a)={fa:.3g}, f(b)={fb:.3g}")
    return float(optimize.brentq(f, a, b, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=500))


def newton_system(
    residual: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
    x0,
    tol: float = 1e-10,
    max_iter: int = 100,
    max_halvings: int = 30,
) -> tuple[np.ndarray, SolverReport]:
    """Damped Newton iteration for a square nonlinear system.

    A full step is accepted when it does not increase the Euclidean residual
    norm; otherwise the step is halved up to ``max_halvings`` times.
    Convergence is declared on the sup-norm of the residual.
    """
    x = np.array(x0, dtype=float)
    F = residual(x)
    sup = float(np.max(np.abs(F)))
    for it in range(max_iter + 1):
        if sup <= tol:
            return x, SolverReport(True, it, sup, "converged")
        if it == max_iter:
            break
        J = jacobian(x)
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            return x, SolverReport(False, it, sup, "singular Jacobian")
        if not np.all(np.isfinite(step)):
            return x, SolverReport(False, it, sup, "singular Jacobian")
        norm0 = float(np.linalg.norm(F))
        lam = 1.0
        for _ in range(max_halvings + 1):
            x_new = x + lam * step
            with np.errstate(all="ignore"):
                F_new = residual(x_new)
            if np.all(np.isfinite(F_new)) and np.linalg.norm(F_new) <= norm0:
                break
            lam *= 0.5
        else:
            return x, SolverReport(False, it, sup, "line search failed")
        x, F = x_new, F_new
        sup = float(np.max(np.abs(F)))
    return x, SolverReport(False, max_iter, sup, "iteration cap reached")


# Gauss-Kronrod 7/15 nodes and weights on [-1, 1]
_XGK = np.array([
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
    0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
    0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.000000000000000000000000000000000,
])
_WGK = np.array([
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327,
])
_NODES = np.r_[-_XGK[:-1], _XGK[::-1]]
_WK = np.r_[_WGK[:-1], _WGK[::-1]]
_WG_FULL = np.zeros(15)
_WG_FULL[[1, 3, 5, 7, 9, 11, 13]] = np.r_[_WG[:-1], _WG[::-1]]


def _gk15(f, a, b):
    c, h = 0.5 * (a + b), 0.5 * (b - a)
    vals = np.asarray(f(c + h * _NODES), dtype=float)
    k = h * float(_WK @ vals)
    g = h * float(_WG_FULL @ vals)
    return k, abs(k - g)


def quad_adaptive(f: Callable, a: float, b: float, tol: float = 1e-10, max_intervals: int = 2000) -> float:
    """Globally adaptive G7-K15 quadrature of ``f`` over ``[a, b]``.

    ``f`` is called with a numpy array of abscissae. Intervals with the
    largest error estimate are bisected until the summed estimate is below
    ``tol``.
    """
    if a == b:
        return 0.0
    if b < a:
        return -quad_adaptive(f, b, a, tol, max_intervals)
    val, err = _gk15(f, a, b)
    parts = [(err, a, b, val)]
    total_err = err
    while total_err > tol:
        if len(parts) >= max_intervals:
            raise NumericsError(f"quadrature refinement cap reached (error {total_err:.3g})")
        idx = max(range(len(parts)), key=lambda i: parts[i][0])
        e, lo, hi, v = parts.pop(idx)
        mid = 0.5 * (lo + hi)
        v1, e1 = _gk15(f, lo, mid)
        v2, e2 = _gk15(f, mid, hi)
        if mid <= lo or mid >= hi:
            raise NumericsError("quadrature interval underflow")
        parts += [(e1, lo, mid, v1), (e2, mid, hi, v2)]
        total_err += e1 + e2 - e
        val += v1 + v2 - v
    return float(math.fsum(p[3] for p in parts))


def minimize_constrained(
    objective: Callable[[np.ndarray], float],
    gradient: Callable[[np.ndarray], np.ndarray],
    linear_ineq: tuple[np.ndarray, np.ndarray],
    x0,
    tol: float = 1e-6,
    max_iter: int = 500,
    ftol: Optional[float] = None,
) -> tuple[np.ndarray, SolverReport]:
    """Minimize a smooth objective subject to ``A @ x >= c``.

    Backed by SLSQP. The reported residual is the KKT stationarity residual
    ``||grad - A_act' lambda||`` with non-negative multipliers fitted on the
    active set, scaled by ``max(1, |f|)``. ``ftol`` is SLSQP's own stopping
    tolerance on the objective (default ``tol * 1e-8``).
    """
    A, c = (np.atleast_2d(np.asarray(m, dtype=float)) for m in linear_ineq)
    c = c.ravel()
    x0 = np.asarray(x0, dtype=float)
    if A.size and np.any(A @ x0 - c <= 0):
        raise NumericsError("starting point is not strictly feasible")
    cons = []
    if A.size:
        cons = [{"type": "ineq", "fun": lambda x: A @ x - c, "jac": lambda x: A}]
    res = optimize.minimize(
        objective, x0, jac=gradient, method="SLSQP", constraints=cons,
        options={"maxiter": max_iter, "ftol": tol * 1e-8 if ftol is None else ftol},
    )
    x = res.x
    if A.size:
        slack = A @ x - c
        if np.any(slack < -1e-8 * (1 + np.abs(c))):
            return x, SolverReport(False, int(res.nit), float("inf"), "infeasible result: " + res.message)
    kkt = _kkt_residual(gradient(x), A, c, x) / max(1.0, abs(float(res.fun)))
    ok = bool(kkt <= tol)
    msg = res.message if ok else f"{res.message} (KKT residual {kkt:.3g})"
    return x, SolverReport(ok, int(res.nit), float(kkt), msg)


def _kkt_residual(g, A, c, x, active_tol=1e-7):
    if not A.size:
        return float(np.linalg.norm(g))
    slack = A @ x - c
    act = slack <= active_tol * (1.0 + np.abs(c) + np.linalg.norm(A, axis=1))
    if not act.any():
        return float(np.linalg.norm(g))
    _, rnorm = optimize.nnls(A[act].T, g)
    return float(rnorm)
