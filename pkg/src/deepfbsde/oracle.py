"""Low-dimensional reference solver for the implicit backward scheme.

Conditional expectations are replaced by least-squares regression on
polynomial features of X_{t_i} (least-squares Monte Carlo).  The implicit
Y-equation at each step is solved pathwise by fixed-point iteration, and
the forward/backward coupling by outer Picard sweeps on a frozen set of
Brownian increments.  Regression and projection use the same paths, which
biases the estimate slightly; tolerances in the tests account for it.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from math import comb
from typing import Optional

import numpy as np

from .problems import FbsdeProblem
from .scheme import TimeGrid, brownian_increments


class OracleNotConverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class RegressionBasis:
    degree: int = 2
    dim: int = 1
    kind: str = "polynomial"

    def __post_init__(self):
        if self.kind != "polynomial":
            raise ValueError(f"unsupported basis kind {self.kind!r}")
        if not 1 <= self.dim <= 3:
            raise ValueError("basis dimension must be between 1 and 3")
        if not 0 <= self.degree <= 4:
            raise ValueError("basis degree must be between 0 and 4")

    @property
    def exponents(self):
        out = []
        for total in range(self.degree + 1):
            for combo in itertools.combinations_with_replacement(range(self.dim), total):
                e = [0] * self.dim
                for j in combo:
                    e[j] += 1
                out.append(tuple(e))
        return out

    @property
    def n_features(self) -> int:
        return comb(self.dim + self.degree, self.degree)

    def design(self, x: np.ndarray) -> np.ndarray:
        """Monomials of the rows of ``x`` (already standardized)."""
        x = np.atleast_2d(x)
        cols = [np.prod(x ** np.array(e), axis=1) for e in self.exponents]
        return np.stack(cols, axis=1)


def regress_conditional(features: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Least-squares coefficients of ``target`` on ``features`` (SVD based).

    ``target`` may be 1-D or have one column per response.  A rank-deficient
    design falls back to a ridge-regularized solve with a warning.
    """
    A = np.asarray(features, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] < A.shape[1]:
        raise ValueError(f"need at least as many rows as columns, got design {A.shape}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite regression data")
    coef, _, rank, sv = np.linalg.lstsq(A, y, rcond=None)
    if rank < A.shape[1]:
        warnings.warn(f"rank-deficient design ({rank} < {A.shape[1]}); using ridge solve", RuntimeWarning, stacklevel=2)
        lam = 1e-10 * max(float(np.trace(A.T @ A)) / A.shape[1], 1e-300)
        coef = np.linalg.solve(A.T @ A + lam * np.eye(A.shape[1]), A.T @ y)
    return coef


@dataclass
class _StepFit:
    center: np.ndarray
    scale: np.ndarray
    intercept_only: bool
    y_coef: np.ndarray
    z_coef: np.ndarray

    def features(self, basis: RegressionBasis, x: np.ndarray) -> np.ndarray:
        if self.intercept_only:
            return np.ones((x.shape[0], 1))
        return basis.design((x - self.center) / self.scale)

    def y(self, basis, x):
        return self.features(basis, x) @ self.y_coef


@dataclass
class OracleSolution:
    Y0: float
    Y0_stderr: float
    y_coefs: list
    z_coefs: list
    n_paths: int
    picard_residuals: list  # outer sweep sup-norm changes
    inner_residuals: list = field(default_factory=list)  # per step, last sweep
    Z_mean: Optional[np.ndarray] = None  # (N, d) pathwise average of Z
    fits: list = field(default_factory=list, repr=False)

    def z_at(self, i: int, x: np.ndarray, basis: RegressionBasis) -> np.ndarray:
        fit = self.fits[i]
        return fit.features(basis, x) @ fit.z_coef


def _fit_step(basis, x):
    spread = x.std(axis=0)
    if np.all(spread < 1e-12 * (1.0 + np.abs(x).max())):
        return np.zeros(x.shape[1]), np.ones(x.shape[1]), True
    return x.mean(axis=0), np.where(spread > 0, spread, 1.0), False


def lsmc_implicit_solve(
    problem: FbsdeProblem,
    grid: TimeGrid,
    basis: RegressionBasis,
    n_paths: int,
    picard_tol: float = 1e-6,
    rng: np.random.Generator | None = None,
    max_sweeps: int = 20,
    inner_tol: float = 1e-13,
    inner_max: int = 200,
    dW: np.ndarray | None = None,
) -> OracleSolution:
    """Solve the implicit discrete scheme by regression Monte Carlo."""
    m, d, N, h = problem.dim_x, problem.dim_w, grid.N, grid.h
    if m > 3 or basis.dim != m:
        raise ValueError(f"oracle supports dim <= 3 with a matching basis (problem dim {m}, basis dim {basis.dim})")
    if n_paths < 10 * basis.n_features:
        raise ValueError(f"n_paths={n_paths} too small for {basis.n_features} features")
    if dW is None:
        dW = brownian_increments(rng if rng is not None else np.random.default_rng(), n_paths, grid, d)
    ts = grid.t
    x0 = np.broadcast_to(problem.initial, (n_paths, m)).copy()

    y_guess = float(problem.terminal(problem.initial[None, :])[0, 0])
    fits: list = [None] * N
    prev_Y = None
    history = []
    sweeps = 1 if not problem.coupled else max_sweeps

    for sweep in range(sweeps):
        # forward pass with the current Y functional
        X = np.empty((n_paths, N + 1, m))
        X[:, 0] = x0
        x = x0
        for i in range(N):
            yv = np.full((n_paths, 1), y_guess) if fits[i] is None else fits[i].y(basis, x)[:, None]
            b = problem.drift(ts[i], x, yv)
            sw = problem.sigma_apply(ts[i], x, yv, dW[:, i])
            x = x + b * h + sw
            X[:, i + 1] = x

        # backward regression pass
        Y = np.empty((n_paths, N + 1))
        Y[:, N] = np.asarray(problem.terminal(X[:, N]))[:, 0]
        inner_hist = [None] * N
        Zbar = np.empty((N, d))
        for i in range(N - 1, -1, -1):
            xi = X[:, i]
            center, scale, only1 = _fit_step(basis, xi)
            A = np.ones((n_paths, 1)) if only1 else basis.design((xi - center) / scale)
            nxt = Y[:, i + 1]
            ey = A @ regress_conditional(A, nxt)
            zc = regress_conditional(A, nxt[:, None] * dW[:, i]) / h
            z = A @ zc
            y = ey.copy()
            hist = []
            for _ in range(inner_max):
                y_new = ey + np.asarray(problem.driver(ts[i], xi, y[:, None], z))[:, 0] * h
                delta = float(np.max(np.abs(y_new - y)))
                hist.append(delta)
                y = y_new
                if delta <= inner_tol * (1.0 + float(np.max(np.abs(y)))):
                    break
            inner_hist[i] = hist
            Y[:, i] = y
            Zbar[i] = z.mean(axis=0)
            yc = regress_conditional(A, y)
            fits[i] = _StepFit(center, scale, only1, yc, zc)

        change = math.inf if prev_Y is None else float(np.max(np.abs(Y - prev_Y)))
        history.append(change)
        prev_Y = Y
        if change <= picard_tol or not problem.coupled:
            break
    else:
        raise OracleNotConverged(f"Picard sweeps did not reach {picard_tol} in {max_sweeps} sweeps", history)

    # spread of the un-projected pathwise estimate g(X_N) + sum_i f_i h
    drive = np.zeros(n_paths)
    for i in range(N):
        zi = fits[i].features(basis, X[:, i]) @ fits[i].z_coef
        drive += np.asarray(problem.driver(ts[i], X[:, i], Y[:, i : i + 1], zi))[:, 0] * h
    stderr = float(np.std(Y[:, N] + drive, ddof=1) / math.sqrt(n_paths))
    return OracleSolution(
        Y0=float(Y[0, 0]),
        Y0_stderr=stderr,
        y_coefs=[f.y_coef for f in fits],
        z_coefs=[f.z_coef for f in fits],
        n_paths=n_paths,
        picard_residuals=history,
        inner_residuals=inner_hist,
        Z_mean=Zbar,
        fits=fits,
    )


@dataclass
class CrossCheck:
    y0_deep: float
    y0_oracle: float
    discrepancy: float
    relative_discrepancy: float
    oracle_stderr: float
    y0_exact: Optional[float]
    deep_gap: Optional[float]
    oracle_gap: Optional[float]


def oracle_cross_check(problem: FbsdeProblem, grid: TimeGrid, policy, oracle_sol: OracleSolution) -> CrossCheck:
    y_deep = float(policy.y0)
    y_or = oracle_sol.Y0
    exact = problem.y0_exact
    disc = abs(y_deep - y_or)
    return CrossCheck(
        y0_deep=y_deep,
        y0_oracle=y_or,
        discrepancy=disc,
        relative_discrepancy=disc / abs(y_or) if y_or != 0 else math.inf,
        oracle_stderr=oracle_sol.Y0_stderr,
        y0_exact=exact,
        deep_gap=None if exact is None else abs(y_deep - exact),
        oracle_gap=None if exact is None else abs(y_or - exact),
    )


def write_oracle_csv(sol: OracleSolution, path) -> None:
    """Per-step coefficients: step, kind (y or z<j>), c0, c1, ..."""
    import csv

    width = max(max(len(c) for c in sol.y_coefs), 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "kind", *[f"c{k}" for k in range(width)]])
        for i, (yc, zc) in enumerate(zip(sol.y_coefs, sol.z_coefs)):
            w.writerow([i, "y", *[repr(float(v)) for v in yc], *[""] * (width - len(yc))])
            zc = np.atleast_2d(zc.T)
            for j, row in enumerate(zc):
                w.writerow([i, f"z{j}", *[repr(float(v)) for v in row], *[""] * (width - len(row))])
