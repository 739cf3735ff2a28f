"""Euler rollout of the coupled system, the terminal-mismatch objective,
the a-posteriori error certificate and statistical diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .networks import SubnetParams, SubnetSpec, init_subnet, subnet_forward
from .problems import FbsdeProblem, eval_coefficients


class RolloutDiverged(FloatingPointError):
    def __init__(self, step: int, what: str):
        super().__init__(f"rollout produced non-finite {what} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")

    @property
    def h(self) -> float:
        return self.T / self.N

    @property
    def t(self) -> np.ndarray:
        knots = np.arange(self.N + 1) * self.h
        knots[-1] = self.T
        return knots


@dataclass
class SolverPolicy:
    """Trainable Y_0 value, the step-0 Z value and the Z-networks.

    With a deterministic initial state the first Z is a constant, so it is a
    plain trainable vector ``z0``; ``subnets[i - 1]`` produces Z at step i
    for ``i = 1 .. N-1``.
    """

    mu0: np.ndarray
    z0: np.ndarray
    subnets: list
    input_layout: str = "xy"

    def parameters(self) -> dict:
        out = {"mu0": self.mu0, "z0": self.z0}
        for i, net in enumerate(self.subnets, start=1):
            for k, v in net.trainable().items():
                out[f"phi{i}.{k}"] = v
        return out

    def buffers(self) -> dict:
        out = {}
        for i, net in enumerate(self.subnets, start=1):
            for k, v in net.buffers().items():
                out[f"phi{i}.{k}"] = v
        return out

    @property
    def y0(self) -> float:
        return float(self.mu0[0])

    def parameter_count(self) -> int:
        return sum(v.size for v in self.parameters().values())


def init_policy(
    problem: FbsdeProblem,
    grid: TimeGrid,
    rng: np.random.Generator,
    y0_interval=(0.0, 1.0),
    input_layout: str = "xy",
    hidden_dims=None,
    scheme: str = "uniform",
) -> SolverPolicy:
    d = problem.dim_w
    if input_layout not in ("xy", "x"):
        raise ValueError(f"input layout must be 'xy' or 'x', got {input_layout!r}")
    hidden = tuple(hidden_dims) if hidden_dims is not None else (d + 10, d + 10)
    spec = SubnetSpec(problem.dim_x + (1 if input_layout == "xy" else 0), hidden, d, output_scale=1.0 / d)
    lo, hi = y0_interval
    mu0 = np.array([rng.uniform(lo, hi)])
    z0 = rng.uniform(-0.1, 0.1, size=d)
    subnets = [init_subnet(spec, rng, scheme) for _ in range(grid.N - 1)]
    return SolverPolicy(mu0, z0, subnets, input_layout)


def constant_policy(problem: FbsdeProblem, grid: TimeGrid, y0: float, z, input_layout: str = "xy") -> SolverPolicy:
    """Policy with Y_0 = y0 and Z identically ``z`` in both modes.

    Each subnet's last batchnorm has gamma = 0 and beta = z / output_scale, so its output
    ignores the input.
    """
    d = problem.dim_w
    zvec = np.broadcast_to(np.asarray(z, dtype=np.float64), (d,)).copy()
    spec = SubnetSpec(problem.dim_x + (1 if input_layout == "xy" else 0), (d + 10, d + 10), d, output_scale=1.0 / d)
    rng = np.random.default_rng(0)
    subnets = []
    for _ in range(grid.N - 1):
        net = init_subnet(spec, rng)
        net.gamma[-1][:] = 0.0
        net.beta[-1][:] = zvec / spec.output_scale
        subnets.append(net)
    return SolverPolicy(np.array([float(y0)]), zvec.copy(), subnets, input_layout)


@dataclass
class PathBatch:
    X: np.ndarray  # (batch, N+1, m)
    Y: np.ndarray  # (batch, N+1)
    Z: np.ndarray  # (batch, N, d)
    dW: np.ndarray  # (batch, N, d)
    F: np.ndarray  # (batch, N) driver values
    terminal_residual: np.ndarray  # (batch,)
    residual_tensor: Optional[ad.Tensor] = field(default=None, repr=False)


def brownian_increments(rng: np.random.Generator, batch: int, grid: TimeGrid, d: int) -> np.ndarray:
    """``(batch, N, d)`` block of N(0, h) increments."""
    raw = ad.gaussian_batch(rng, batch * grid.N, d).data
    return raw.reshape(batch, grid.N, d) * math.sqrt(grid.h)


def rollout(
    problem: FbsdeProblem,
    grid: TimeGrid,
    policy: SolverPolicy,
    batch: int | None = None,
    rng: np.random.Generator | None = None,
    mode: str = "eval",
    tape: ad.Tape | None = None,
    dW: np.ndarray | None = None,
    bn_momentum: float = 0.99,
    bn_eps: float = 1e-6,
) -> PathBatch:
    """Simulate X, Y, Z forward with the Euler scheme.

    X and Y are advanced with the same increments.  In train mode (with a
    tape) every parameter is registered as a leaf and the whole rollout is
    recorded, so ``objective`` can be differentiated end to end.
    """
    d, m, N, h = problem.dim_w, problem.dim_x, grid.N, grid.h
    if dW is None:
        if rng is None or batch is None:
            raise ValueError("pass either dW or (batch, rng)")
        dW = brownian_increments(rng, batch, grid, d)
    B = dW.shape[0]
    if dW.shape != (B, N, d):
        raise ValueError(f"dW must have shape (batch, {N}, {d}), got {dW.shape}")
    if mode == "train" and B < 2:
        raise ValueError("train mode needs a batch of at least 2")
    if len(policy.subnets) != N - 1:
        raise ValueError(f"policy has {len(policy.subnets)} subnets, grid needs {N - 1}")

    if tape is not None:
        mu0 = tape.leaf(policy.mu0, "mu0")
        z0 = tape.leaf(policy.z0, "z0")
    else:
        mu0, z0 = policy.mu0, policy.z0

    ts = grid.t
    X = np.empty((B, N + 1, m))
    Y = np.empty((B, N + 1))
    Z = np.empty((B, N, d))
    F = np.empty((B, N))
    x = np.broadcast_to(problem.initial, (B, m)).copy()
    y = ad.add(np.zeros((B, 1)), mu0)
    X[:, 0] = x
    Y[:, 0] = ad.value(y)[:, 0]
    for i in range(N):
        t = float(ts[i])
        w = dW[:, i, :]
        if i == 0:
            z = ad.add(np.zeros((B, d)), z0)
        else:
            inp = ad.concat([x, y], axis=1) if policy.input_layout == "xy" else x
            z = subnet_forward(
                policy.subnets[i - 1], inp, mode, tape, prefix=f"phi{i}.", momentum=bn_momentum, bn_eps=bn_eps
            )
        try:
            b, sw, f = eval_coefficients(problem, t, x, y, z, w)
        except FloatingPointError as exc:
            raise RolloutDiverged(i, str(exc)) from None
        with np.errstate(over="ignore", invalid="ignore"):
            x = ad.add(ad.add(x, ad.scale(b, h)), sw)
            y = ad.add(ad.sub(y, ad.scale(f, h)), ad.sum(ad.mul(z, w), axis=1, keepdims=True))
        xv, yv = ad.value(x), ad.value(y)
        if not np.all(np.isfinite(xv)):
            raise RolloutDiverged(i + 1, "X")
        if not np.all(np.isfinite(yv)):
            raise RolloutDiverged(i + 1, "Y")
        X[:, i + 1] = xv
        Y[:, i + 1] = yv[:, 0]
        Z[:, i] = ad.value(z)
        F[:, i] = ad.value(f)[:, 0]
    res = ad.sub(problem.terminal(x), y)
    res_val = ad.value(res)[:, 0].copy()
    return PathBatch(X, Y, Z, dW, F, res_val, res if isinstance(res, ad.Tensor) and res.tape is not None else None)


def objective(batch: PathBatch) -> ad.Tensor:
    """Mean squared terminal mismatch, differentiable when the rollout was taped."""
    if batch.terminal_residual.size == 0:
        raise ValueError("empty path batch")
    if batch.residual_tensor is not None:
        return ad.mean(ad.square(batch.residual_tensor))
    return ad.Tensor(np.mean(batch.terminal_residual**2))


@dataclass(frozen=True)
class ErrorCertificate:
    """The pair (h, loss) controlling the a-posteriori error bound.

    ``C_empirical`` is a constant fitted on a run with a known solution; it
    is an empirical calibration, not a proven constant.
    """

    loss: float
    h: float
    C_empirical: Optional[float] = None

    @property
    def bound_form(self):
        return (self.h, self.loss)

    @property
    def bound(self) -> Optional[float]:
        if self.C_empirical is None:
            return None
        return self.C_empirical * (self.h + self.loss)


def certificate(loss: float, h: float, C: float | None = None) -> ErrorCertificate:
    if loss < 0 or not h > 0:
        raise ValueError("need loss >= 0 and h > 0")
    return ErrorCertificate(float(loss), float(h), None if C is None else float(C))


def fit_certificate_constant(err_sq, h, losses) -> float:
    """Smallest C with err_sq <= C (h + loss) on every supplied checkpoint."""
    err_sq = np.asarray(err_sq, dtype=np.float64)
    denom = np.asarray(h, dtype=np.float64) + np.asarray(losses, dtype=np.float64)
    return float(np.max(err_sq / denom))


@dataclass
class MartingaleResidual:
    mean: np.ndarray  # per step
    stderr: np.ndarray
    z: np.ndarray

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z))) if self.z.size else 0.0


def martingale_residual_test(problem, grid, policy, batch, rng) -> MartingaleResidual:
    """Per-step mean of Y_{i+1} - Y_i + f_i h, whose population value is 0."""
    pb = rollout(problem, grid, policy, batch, rng, mode="eval")
    inc = pb.Y[:, 1:] - pb.Y[:, :-1] + pb.F * grid.h
    n = inc.shape[0]
    mean = inc.mean(axis=0)
    se = inc.std(axis=0, ddof=1) / math.sqrt(n)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, mean / np.where(se > 0, se, 1.0), 0.0)
    return MartingaleResidual(mean, se, z)


@dataclass
class Lemma2Result:
    lhs: float  # sample mean of W_{s1} Q (W_{s2} - W_{s1})
    rhs: float  # sample mean of W_{s1} int_{s1}^{s2} 2 W_s ds
    exact: float
    stderr: float
    passed: bool


def lemma2_statistical_check(rng: np.random.Generator, n_samples: int, s1: float = 1.0, s2: float = 2.0) -> Lemma2Result:
    """Monte Carlo check of E[Q dW | F_s1] = E[int H ds | F_s1] for Q = W_s2^2.

    Here H_s = 2 W_s.  Conditioning is tested against the F_s1-measurable
    weight W_s1; both sides then equal 2 s1 (s2 - s1).
    """
    if s2 < s1 or s1 < 0:
        raise ValueError("need 0 <= s1 <= s2")
    L = s2 - s1
    w1 = rng.standard_normal(n_samples) * math.sqrt(s1)
    # (B_L, int_0^L B_u du) is Gaussian with var L, L^3/3 and covariance L^2/2
    g1 = rng.standard_normal(n_samples)
    g2 = rng.standard_normal(n_samples)
    dw = math.sqrt(L) * g1
    integral = (L**1.5 / 2.0) * g1 + math.sqrt(L**3 / 12.0) * g2
    lhs_s = w1 * (w1 + dw) ** 2 * dw
    rhs_s = w1 * 2.0 * (w1 * L + integral)
    diff = lhs_s - rhs_s
    se = float(np.std(diff, ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    se_l = float(np.std(lhs_s, ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    se_r = float(np.std(rhs_s, ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    exact = 2.0 * s1 * L
    lhs, rhs = float(lhs_s.mean()), float(rhs_s.mean())
    ok = abs(lhs - rhs) <= 4.0 * se + 1e-15
    ok &= abs(lhs - exact) <= 4.0 * se_l + 1e-15
    ok &= abs(rhs - exact) <= 4.0 * se_r + 1e-15
    return Lemma2Result(lhs, rhs, exact, se, bool(ok))


def export_paths_csv(batch: PathBatch, grid: TimeGrid, path) -> None:
    """One row per path per step: path_id, i, t, X..., Y, Z... (Z blank at i = N)."""
    B, n1, m = batch.X.shape
    d = batch.Z.shape[2]
    ts = grid.t
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "i", "t", *[f"X{j}" for j in range(m)], "Y", *[f"Z{j}" for j in range(d)]])
        for p in range(B):
            for i in range(n1):
                z = [repr(float(v)) for v in batch.Z[p, i]] if i < n1 - 1 else [""] * d
                w.writerow([p, i, repr(float(ts[i])), *[repr(float(v)) for v in batch.X[p, i]], repr(float(batch.Y[p, i])), *z])


def rollout_gradient_check(problem, grid, policy, dW, eps: float = 1e-6, rel_floor: float = 1e-6) -> float:
    """Tape gradient of the train-mode objective against central differences.

    Returns max |fd - g| / (|g| + rel_floor * max|g|).  The scaled floor keeps
    structurally zero gradients (biases feeding a batchnorm) from dividing
    finite-difference noise by roundoff.
    """
    tape = ad.Tape()
    loss = objective(rollout(problem, grid, policy, dW=dW, mode="train", tape=tape))
    grads = ad.backward(tape, loss)
    params = policy.parameters()
    gmax = max(float(np.max(np.abs(g))) for g in grads.values())
    floor = rel_floor * gmax if gmax > 0 else 1e-12

    def f():
        return float(objective(rollout(problem, grid, policy, dW=dW, mode="train")))

    worst = 0.0
    for name, arr in params.items():
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + eps
            fp = f()
            flat[j] = keep - eps
            fm = f()
            flat[j] = keep
            fd = (fp - fm) / (2.0 * eps)
            worst = max(worst, abs(fd - gflat[j]) / (abs(gflat[j]) + floor))
    return worst
