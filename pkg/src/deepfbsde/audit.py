"""Weak-coupling / monotonicity constants and the well-posedness check.

Given the Lipschitz and monotonicity constants of a problem, computes
``L0``, ``L1`` and ``c`` and reports whether ``L0 < 1/e`` and ``c < 1``.

Bracket grouping used for ``c`` (the typeset formula spans several lines)::

    c = inf_{lam > 0}  (exp([2 k_b + 1 + s_x + (b_y + s_y) L1] T) v 1)
                       * (1 + 1/lam) * (b_y + s_y) * T
                       * ( g_x * G1(A, B(lam))
                           + f_x * T * G0(A) * G0(B(lam)) )

    A      = (2 k_f + 1 + f_z) T
    B(lam) = (2 k_b + 1 + s_x + (1 + lam)(b_y + s_y) L1) T

With this grouping c vanishes in both decoupled limits (b_y = s_y = 0 or
g_x = f_x = 0).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy import optimize

from .problems import ProblemConstants

LAMBDA_RANGE = (1e-6, 1e6)


def gamma0(x):
    """(e^x - 1) / x, continued by its Taylor series near 0."""
    x = np.asarray(x, dtype=np.float64)
    small = np.abs(x) < 1e-6
    safe = np.where(small, 1.0, x)
    with np.errstate(over="ignore"):
        val = np.expm1(safe) / safe
    series = 1.0 + x / 2.0 + x * x / 6.0
    out = np.where(small, series, val)
    return out.item() if out.ndim == 0 else out


def _sup_theta(x):
    # sup over 0 < theta < 1 of theta * exp(theta x)
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore", divide="ignore"):
        out = np.where(x >= -1.0, np.exp(x), np.exp(-1.0) / -np.where(x < -1.0, x, -1.0))
    return out


def gamma1(x, y):
    """sup_{0<theta<1} theta e^{theta x} * gamma0(y)."""
    out = _sup_theta(x) * gamma0(y)
    out = np.asarray(out)
    return out.item() if out.ndim == 0 else out


def compute_L0_L1(k: ProblemConstants):
    T = k.T
    coupling = (k.b_y + k.sigma_y) * (k.g_x + k.f_x * T) * T
    growth = (2 * k.k_b + 2 * k.k_f + 2 + k.sigma_x + k.f_z) * T
    with np.errstate(over="ignore"):
        L0 = coupling * float(np.exp(coupling + growth)) if coupling else 0.0
        L1 = (k.g_x + k.f_x * T) * max(float(np.exp(coupling + growth + 1.0)), 1.0)
    return float(L0), float(L1)


def c_objective(lam, k: ProblemConstants, L1: float):
    """The bracketed expression minimized over lambda_1 > 0."""
    lam = np.asarray(lam, dtype=np.float64)
    T = k.T
    by_sy = k.b_y + k.sigma_y
    with np.errstate(over="ignore"):
        pre = max(float(np.exp((2 * k.k_b + 1 + k.sigma_x + by_sy * L1) * T)), 1.0)
    a = (2 * k.k_f + 1 + k.f_z) * T
    b = (2 * k.k_b + 1 + k.sigma_x + (1.0 + lam) * by_sy * L1) * T
    with np.errstate(over="ignore", invalid="ignore"):
        inner = k.g_x * gamma1(a, b) + k.f_x * T * gamma0(a) * gamma0(b)
        val = pre * (1.0 + 1.0 / lam) * by_sy * T * inner
    return np.where(np.isnan(val), np.inf, val)


def compute_c(k: ProblemConstants, L1: float | None = None, rtol: float = 1e-8):
    """Minimize over lambda_1 on a log scale; returns (c, lambda1_star).

    A coarse log grid brackets the minimum, then golden-section search
    refines it in log(lambda).
    """
    if L1 is None:
        L1 = compute_L0_L1(k)[1]
    if (k.b_y + k.sigma_y) * k.T == 0 or (k.g_x == 0 and k.f_x == 0):
        return 0.0, 1.0
    lo, hi = np.log(LAMBDA_RANGE[0]), np.log(LAMBDA_RANGE[1])
    grid = np.linspace(lo, hi, 241)
    vals = c_objective(np.exp(grid), k, L1)
    j = int(np.argmin(vals))
    if not np.isfinite(vals[j]):
        return math.inf, float(np.exp(grid[j]))
    a, b = grid[max(j - 1, 0)], grid[min(j + 1, grid.size - 1)]

    def f(s):
        return float(c_objective(math.exp(s), k, L1))

    if 0 < j < grid.size - 1:
        s_star, c_val, _ = optimize.golden(f, brack=(a, grid[j], b), tol=rtol, full_output=True)
    else:
        r = optimize.minimize_scalar(f, bounds=(a, b), method="bounded", options={"xatol": rtol})
        s_star, c_val = r.x, r.fun
        warnings.warn(
            f"c minimizer at the boundary of lambda_1 in {LAMBDA_RANGE}; the infimum may not be attained",
            RuntimeWarning,
            stacklevel=2,
        )
    return float(c_val), float(math.exp(s_star))


@dataclass
class AuditReport:
    L0: float
    L1: float
    c: float
    lambda1_star: float
    holds: bool
    margin: float

    def to_dict(self) -> dict:
        return asdict(self)


def check_conditions(k: ProblemConstants) -> AuditReport:
    L0, L1 = compute_L0_L1(k)
    c, lam = compute_c(k, L1)
    holds = L0 < math.exp(-1.0) and c < 1.0
    return AuditReport(L0, L1, c, lam, bool(holds), float(min(math.exp(-1.0) - L0, 1.0 - c)))
