"""Coupled FBSDE problem definitions and the built-in benchmarks.

Coefficient callables receive ``t`` (float), ``x`` of shape ``(batch, m)``,
``y`` of shape ``(batch, 1)``, ``z`` and ``w`` of shape ``(batch, d)``.
They are written against :mod:`deepfbsde.autodiff` so they work on plain
arrays and on taped tensors alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class FbsdeProblem:
    name: str
    dim_x: int
    dim_w: int
    horizon: float
    initial: np.ndarray
    drift: Callable
    driver: Callable
    terminal: Callable
    diffusion: Optional[Callable] = None  # (t, x, y, w) -> sigma(t, x, y) w
    diffusion_matrix: Optional[Callable] = None  # (t, x, y) -> (batch, m, d)
    analytic_u: Optional[Callable] = None  # (t, x) -> (batch,) array
    coupled: bool = True
    params: tuple = ()

    def __post_init__(self):
        if self.diffusion is None and self.diffusion_matrix is None:
            raise ValueError("problem needs a diffusion action or a diffusion matrix")
        if np.shape(self.initial) != (self.dim_x,):
            raise ValueError(f"initial state must have shape ({self.dim_x},)")

    def sigma_apply(self, t, x, y, w):
        if self.diffusion is not None:
            return self.diffusion(t, x, y, w)
        mat = self.diffusion_matrix(t, x, y)
        b, m, d = ad.value(mat).shape
        prod = ad.mul(mat, ad.reshape(w, (b, 1, d)))
        return ad.sum(prod, axis=2)

    @property
    def y0_exact(self) -> Optional[float]:
        if self.analytic_u is None:
            return None
        return float(self.analytic_u(0.0, self.initial[None, :])[0])


@dataclass(frozen=True)
class ProblemConstants:
    """Lipschitz / monotonicity constants of a problem (all squared forms)."""

    T: float
    k_b: float = 0.0
    k_f: float = 0.0
    K: float = 0.0
    b_y: float = 0.0
    sigma_x: float = 0.0
    sigma_y: float = 0.0
    f_x: float = 0.0
    f_z: float = 0.0
    g_x: float = 0.0
    b_0: float = 0.0
    sigma_0: float = 0.0
    f_0: float = 0.0
    g_0: float = 0.0

    def __post_init__(self):
        nonneg = ("K", "b_y", "sigma_x", "sigma_y", "f_x", "f_z", "g_x", "b_0", "sigma_0", "f_0", "g_0")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ValueError(f"constant {name} must be nonnegative")
        if self.T <= 0:
            raise ValueError("T must be positive")


def _sqnorm(x):
    return ad.sum(ad.square(x), axis=1, keepdims=True)


def example1(dim: int = 100, T: float = 5.0, x0: float = 1.0, variant: str = "consistent") -> FbsdeProblem:
    """Coupled problem with Y_t = exp(-|X_t|^2 / (d (t + 5))).

    ``variant="printed"`` keeps two typeset forms, a ``(2 + x)^3`` drift
    denominator and ``exp(-|x|^2/(d(t+5)))`` inside the driver's square
    root.  They fail the Ito consistency check; the default ``consistent``
    variant uses ``(2 + x^2)^3`` and ``exp(-2|x|^2/(d(t+5)))``, for which
    u solves the associated PDE exactly.
    """
    if variant not in ("consistent", "printed"):
        raise ValueError(f"unknown variant {variant!r}")
    d = dim

    def drift(t, x, y):
        x2 = ad.square(x)
        base = (2.0 + x2) if variant == "consistent" else (2.0 + x)
        return ad.div(ad.mul(x, 1.0 + x2), ad.power(base, 3))

    def diffusion(t, x, y, w):
        x2 = ad.square(x)
        e2 = ad.exp(ad.scale(_sqnorm(x), -2.0 / (d * (t + 5.0))))
        y2 = ad.square(y)
        root = ad.sqrt(ad.div(1.0 + 2.0 * y2, 1.0 + y2 + e2))
        return ad.mul(ad.mul(ad.div(1.0 + x2, 2.0 + x2), root), w)

    def driver(t, x, y, z):
        s = d * (t + 5.0)
        x2 = ad.square(x)
        q = 2.0 + x2
        one_x2 = 1.0 + x2
        terms = (
            4.0 * x2 * one_x2 / ad.power(q, 3)
            + ad.square(one_x2) / ad.square(q)
            - 2.0 * x2 * ad.square(one_x2) / (s * ad.square(q))
            - x2 / (t + 5.0)
        )
        r2 = _sqnorm(x)
        a = ad.mul(ad.exp(ad.scale(r2, -1.0 / s)), ad.sum(terms, axis=1, keepdims=True)) / s
        inner = ad.exp(ad.scale(r2, (-2.0 if variant == "consistent" else -1.0) / s))
        y2 = ad.square(y)
        root = ad.sqrt(ad.div(1.0 + y2 + inner, 1.0 + 2.0 * y2))
        bz = ad.sum(ad.mul(ad.div(x, ad.square(q)), z), axis=1, keepdims=True)
        return a + ad.mul(bz, root)

    def terminal(x):
        return ad.exp(ad.scale(_sqnorm(x), -1.0 / (d * (T + 5.0))))

    def exact(t, x):
        x = np.asarray(x, dtype=np.float64)
        return np.exp(-np.sum(x * x, axis=1) / (d * (t + 5.0)))

    return FbsdeProblem(
        name="example1",
        dim_x=d,
        dim_w=d,
        horizon=T,
        initial=np.full(d, float(x0)),
        drift=drift,
        diffusion=diffusion,
        driver=driver,
        terminal=terminal,
        analytic_u=exact,
        coupled=True,
        params=(("dim", d), ("T", T), ("x0", x0), ("variant", variant)),
    )


def example2(
    dim: int = 100,
    sigma: float = 0.3,
    r: float = 0.1,
    D: float = 0.1,
    T: float = 1.0,
    x0: float = math.pi / 2,
    variant: str = "consistent",
) -> FbsdeProblem:
    """Coupled problem with Y_t = exp(-r (T - t)) D sum_j sin(X_{j,t}).

    The driver's cubic term is ``sigma^2/2 exp(-3 r (T - t)) (D sum sin x)^3``.
    ``variant="printed"`` puts ``sigma^2`` inside the exponent instead, as
    typeset; that form does not reproduce the stated solution.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if variant not in ("consistent", "printed"):
        raise ValueError(f"unknown variant {variant!r}")
    d = dim

    def drift(t, x, y):
        return ad.mul(x, 0.0)

    def diffusion(t, x, y, w):
        return ad.mul(ad.scale(y, sigma), w)

    def driver(t, x, y, z):
        s = ad.scale(ad.sum(ad.sin(x), axis=1, keepdims=True), D)
        if variant == "consistent":
            k = 0.5 * sigma**2 * math.exp(-3.0 * r * (T - t))
        else:
            k = 0.5 * math.exp(-3.0 * r * (T - t) * sigma**2)
        return ad.scale(y, -r) + ad.scale(ad.power(s, 3), k)

    def terminal(x):
        return ad.scale(ad.sum(ad.sin(x), axis=1, keepdims=True), D)

    def exact(t, x):
        x = np.asarray(x, dtype=np.float64)
        return math.exp(-r * (T - t)) * D * np.sum(np.sin(x), axis=1)

    return FbsdeProblem(
        name="example2",
        dim_x=d,
        dim_w=d,
        horizon=T,
        initial=np.full(d, float(x0)),
        drift=drift,
        diffusion=diffusion,
        driver=driver,
        terminal=terminal,
        analytic_u=exact,
        coupled=True,
        params=(("dim", d), ("sigma", sigma), ("r", r), ("D", D), ("T", T), ("x0", x0), ("variant", variant)),
    )


def linear1d(x0: float = 1.0, T: float = 1.0) -> FbsdeProblem:
    """dX = dW, Y_t = E[X_T | F_t] = X_t, Z = 1."""

    return FbsdeProblem(
        name="linear1d",
        dim_x=1,
        dim_w=1,
        horizon=T,
        initial=np.array([float(x0)]),
        drift=lambda t, x, y: ad.mul(x, 0.0),
        diffusion=lambda t, x, y, w: w,
        driver=lambda t, x, y, z: ad.mul(y, 0.0),
        terminal=lambda x: x,
        analytic_u=lambda t, x: np.asarray(x, dtype=np.float64)[:, 0].copy(),
        coupled=False,
        params=(("x0", x0), ("T", T)),
    )


def zero_problem(dim: int = 1, T: float = 1.0) -> FbsdeProblem:
    """All coefficients vanish; Y = 0."""

    return FbsdeProblem(
        name="zero",
        dim_x=dim,
        dim_w=dim,
        horizon=T,
        initial=np.zeros(dim),
        drift=lambda t, x, y: ad.mul(x, 0.0),
        diffusion=lambda t, x, y, w: ad.mul(w, 0.0),
        driver=lambda t, x, y, z: ad.mul(y, 0.0),
        terminal=lambda x: ad.sum(ad.mul(x, 0.0), axis=1, keepdims=True),
        analytic_u=lambda t, x: np.zeros(np.shape(x)[0]),
        coupled=False,
        params=(("dim", dim), ("T", T)),
    )


_BUILTINS = {
    "example1": example1,
    "example2": example2,
    "linear1d": linear1d,
    "zero": zero_problem,
}


def builtin_problem(name: str, dim: int | None = None, **params) -> FbsdeProblem:
    """Look up a built-in problem by name."""
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(_BUILTINS)}") from None
    if dim is not None:
        if dim < 1:
            raise ValueError("dim must be >= 1")
        if name == "linear1d":
            if dim != 1:
                raise ValueError("linear1d is one-dimensional")
        else:
            params["dim"] = dim
    return factory(**params)


def eval_coefficients(problem: FbsdeProblem, t, x, y, z, w):
    """Batched (drift, sigma action, driver) with a finiteness guard."""
    if not 0.0 <= t <= problem.horizon + 1e-12:
        raise ValueError(f"t={t} outside [0, {problem.horizon}]")
    b = problem.drift(t, x, y)
    sw = problem.sigma_apply(t, x, y, w)
    f = problem.driver(t, x, y, z)
    for label, val in (("drift", b), ("diffusion", sw), ("driver", f)):
        if not np.all(np.isfinite(ad.value(val))):
            raise FloatingPointError(
                f"non-finite {label} at t={t}: x={ad.value(x)!r}, y={ad.value(y)!r}, z={ad.value(z)!r}"
            )
    return b, sw, f


def analytic_reference(problem: FbsdeProblem, t, x) -> np.ndarray:
    if problem.analytic_u is None:
        raise ValueError(f"problem {problem.name!r} has no analytic solution")
    return problem.analytic_u(t, np.atleast_2d(np.asarray(x, dtype=np.float64)))
