"""Stochastic training loop, validation, repeated runs and convergence studies."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .networks import AdamState, LrSchedule, adam_step, lr_at, load_checkpoint, save_checkpoint
from .problems import FbsdeProblem
from .scheme import (
    ErrorCertificate,
    RolloutDiverged,
    SolverPolicy,
    TimeGrid,
    brownian_increments,
    certificate,
    init_policy,
    objective,
    rollout,
)

log = logging.getLogger(__name__)

RUN_SEED_STRIDE = 10007
TRAINING_COLUMNS = ("step", "lr", "val_loss", "y0_estimate", "rel_error", "wall_s")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 64
    validation_paths: int = 256
    lr: LrSchedule = LrSchedule(1e-2, 1e-3, 100, 2000)
    seed: int = 0
    y0_init: tuple = (0.0, 1.0)
    input_layout: str = "xy"
    hidden_dims: Optional[tuple] = None
    init_scheme: str = "uniform"
    checkpoint_every: int = 100
    max_seconds: Optional[float] = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    bn_momentum: float = 0.99
    bn_eps: float = 1e-6
    deterministic: bool = False

    def __post_init__(self):
        if self.batch_size < 2 or self.validation_paths < 2:
            raise ValueError("batch_size and validation_paths must be >= 2")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.input_layout not in ("xy", "x"):
            raise ValueError(f"input_layout must be 'xy' or 'x', got {self.input_layout!r}")
        lo, hi = self.y0_init
        if hi < lo:
            raise ValueError("y0_init must be an interval (lo, hi) with lo <= hi")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["y0_init"] = list(self.y0_init)
        if self.hidden_dims is not None:
            out["hidden_dims"] = list(self.hidden_dims)
        return out


@dataclass
class Checkpoint:
    step: int
    lr: float
    val_loss: float
    y0_estimate: float
    rel_error: float
    wall_s: float


@dataclass
class TrainingReport:
    checkpoints: list = field(default_factory=list)
    certificate: Optional[ErrorCertificate] = None
    seeds: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    y0_exact: Optional[float] = None
    h: float = float("nan")
    status: str = "completed"
    skipped_steps: int = 0
    wall_seconds: float = 0.0

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]

    def column(self, name) -> np.ndarray:
        return np.array([getattr(c, name) for c in self.checkpoints], dtype=np.float64)

    def to_dict(self) -> dict:
        cert = None
        if self.certificate is not None:
            cert = {"loss": self.certificate.loss, "h": self.certificate.h, "C_empirical": self.certificate.C_empirical}
        return {
            "status": self.status,
            "h": self.h,
            "y0_exact": self.y0_exact,
            "skipped_steps": self.skipped_steps,
            "wall_seconds": self.wall_seconds,
            "seeds": self.seeds,
            "config": self.config,
            "certificate": cert,
            "checkpoints": [asdict(c) for c in self.checkpoints],
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAINING_COLUMNS)
            for c in self.checkpoints:
                w.writerow([c.step, repr(c.lr), repr(c.val_loss), repr(c.y0_estimate), repr(c.rel_error), repr(c.wall_s)])

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def stream_seeds(seed: int) -> dict:
    """Independent integer seeds for the init, training and validation streams."""
    children = np.random.SeedSequence(seed).spawn(3)
    names = ("init", "train", "validation")
    return {n: int(c.generate_state(1, np.uint64)[0]) for n, c in zip(names, children)}


def validation_increments(problem: FbsdeProblem, grid: TimeGrid, n_paths: int, seed: int) -> np.ndarray:
    return brownian_increments(np.random.default_rng(seed), n_paths, grid, problem.dim_w)


def validate(policy: SolverPolicy, problem: FbsdeProblem, grid: TimeGrid, n_paths: int = 256, seed: int = 0, dW=None):
    """Eval-mode loss on a fixed stream; returns (loss, y0, rel_error or None)."""
    if dW is None:
        dW = validation_increments(problem, grid, n_paths, seed)
    pb = rollout(problem, grid, policy, dW=dW, mode="eval")
    loss = float(objective(pb))
    y0 = policy.y0
    exact = problem.y0_exact
    rel = None if exact is None or exact == 0 else abs(y0 - exact) / abs(exact)
    return loss, y0, rel


def train(problem: FbsdeProblem, grid: TimeGrid, cfg: TrainConfig, policy: SolverPolicy | None = None):
    """Train a policy with Adam on freshly sampled paths each iteration.

    Checkpoints (validation loss on the fixed stream, Y_0 estimate and its
    relative error) are taken at step 0, every ``checkpoint_every`` steps
    and at the end.  In deterministic mode the ``wall_s`` column is
    written as 0 so CSVs are byte-reproducible.
    """
    seeds = stream_seeds(cfg.seed)
    if policy is None:
        policy = init_policy(
            problem,
            grid,
            np.random.default_rng(seeds["init"]),
            cfg.y0_init,
            cfg.input_layout,
            cfg.hidden_dims,
            cfg.init_scheme,
        )
    train_rng = np.random.default_rng(seeds["train"])
    dW_val = validation_increments(problem, grid, cfg.validation_paths, seeds["validation"])
    schedule = cfg.lr if cfg.lr.total_steps == cfg.iterations else replace(cfg.lr, total_steps=cfg.iterations)
    adam = AdamState(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    params = policy.parameters()
    exact = problem.y0_exact
    report = TrainingReport(
        seeds={"seed": cfg.seed, **seeds},
        config={"problem": problem.name, "problem_params": dict(problem.params), "N": grid.N, "T": grid.T, **cfg.to_dict()},
        y0_exact=exact,
        h=grid.h,
    )
    t_start = time.perf_counter()

    def checkpoint(step):
        lr = lr_at(schedule, min(step, schedule.total_steps))
        loss, y0, rel = validate(policy, problem, grid, dW=dW_val)
        wall = 0.0 if cfg.deterministic else round(time.perf_counter() - t_start, 3)
        report.checkpoints.append(Checkpoint(step, lr, loss, y0, float("nan") if rel is None else rel, wall))
        log.debug("step %d lr %.3g val_loss %.6g y0 %.6g", step, lr, loss, y0)
        if not math.isfinite(loss):
            report.status = "diverged"
            raise TrainingDiverged(f"validation loss is {loss} at step {step}", report)

    checkpoint(0)
    step = 0
    while step < cfg.iterations:
        if cfg.max_seconds is not None and time.perf_counter() - t_start > cfg.max_seconds:
            report.status = "timeout"
            log.warning("wall-time budget of %s s exhausted at step %d", cfg.max_seconds, step)
            break
        lr = lr_at(schedule, step)
        tape = ad.Tape()
        try:
            pb = rollout(
                problem, grid, policy, cfg.batch_size, train_rng, "train", tape, bn_momentum=cfg.bn_momentum, bn_eps=cfg.bn_eps
            )
        except RolloutDiverged as exc:
            report.skipped_steps += 1
            log.warning("skipping optimizer step %d: %s", step, exc)
            step += 1
            continue
        loss = objective(pb)
        grads = ad.backward(tape, loss)
        adam_step(adam, params, grads, lr)
        step += 1
        if step % cfg.checkpoint_every == 0 or step == cfg.iterations:
            checkpoint(step)
    if report.checkpoints[-1].step != step:
        checkpoint(step)
    report.wall_seconds = time.perf_counter() - t_start
    report.certificate = certificate(max(report.final.val_loss, 0.0), grid.h)
    return policy, report


def run_seed(cfg: TrainConfig, r: int) -> int:
    return cfg.seed + r * RUN_SEED_STRIDE


@dataclass
class AggregateReport:
    steps: np.ndarray
    mean: dict
    sd: dict
    reports: list

    @property
    def final_mean_rel_error(self) -> float:
        return float(self.mean["rel_error"][-1])

    @property
    def final_sd_rel_error(self) -> float:
        return float(self.sd["rel_error"][-1])


def aggregate(reports) -> AggregateReport:
    """Per-checkpoint mean and (population) standard deviation across runs."""
    n = min(len(r.checkpoints) for r in reports)
    steps = reports[0].column("step")[:n]
    mean, sd = {}, {}
    for col in ("val_loss", "y0_estimate", "rel_error", "lr"):
        stack = np.stack([r.column(col)[:n] for r in reports])
        mean[col] = stack.mean(axis=0)
        sd[col] = stack.std(axis=0)
    return AggregateReport(steps, mean, sd, list(reports))


def multi_run(problem, grid, cfg: TrainConfig, n_runs: int, seeds=None):
    """Train ``n_runs`` independent policies; seeds are cfg.seed + r * 10007."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    seeds = list(seeds) if seeds is not None else [run_seed(cfg, r) for r in range(n_runs)]
    reports, policies = [], []
    for r, s in enumerate(seeds):
        try:
            pol, rep = train(problem, grid, replace(cfg, seed=s))
        except Exception as exc:
            raise RuntimeError(f"run {r} (seed {s}) failed: {exc}") from exc
        policies.append(pol)
        reports.append(rep)
    agg = aggregate(reports)
    agg.policies = policies
    return agg


@dataclass
class ConvergenceRow:
    N: int
    h: float
    mean_rel_error: float
    sd_rel_error: float


def convergence_study(problem, cfg: TrainConfig, N_list, n_runs: int = 1):
    """One training per N (and per run), identical otherwise; error vs h table."""
    rows = []
    for N in N_list:
        if N < 1:
            raise ValueError(f"N must be >= 1, got {N}")
        grid = TimeGrid(problem.horizon, int(N))
        try:
            agg = multi_run(problem, grid, cfg, n_runs)
        except Exception as exc:
            raise RuntimeError(f"convergence study failed at N={N}: {exc}") from exc
        rows.append(ConvergenceRow(int(N), grid.h, agg.final_mean_rel_error, agg.final_sd_rel_error))
    return rows


def write_convergence_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "h", "mean_rel_error", "sd_rel_error"])
        for r in rows:
            w.writerow([r.N, repr(r.h), repr(r.mean_rel_error), repr(r.sd_rel_error)])


def save_policy(path, policy: SolverPolicy, seed: int | None = None) -> None:
    arrays = {**policy.parameters(), **{f"buf:{k}": v for k, v in policy.buffers().items()}}
    spec = policy.subnets[0].spec if policy.subnets else None
    meta = {
        "seed": seed,
        "input_layout": policy.input_layout,
        "n_subnets": len(policy.subnets),
        "spec": None if spec is None else [spec.input_dim, list(spec.hidden_dims), spec.output_dim, spec.batchnorm, spec.output_scale],
    }
    save_checkpoint(path, arrays, meta)


def load_policy(path) -> tuple:
    from .networks import SubnetParams, SubnetSpec

    arrays, meta = load_checkpoint(path)
    subnets = []
    if meta["n_subnets"]:
        i_dim, hidden, o_dim, bn, scale = meta["spec"]
        spec = SubnetSpec(i_dim, tuple(hidden), o_dim, batchnorm=bn, output_scale=scale)
        n_layers = len(hidden) + 1
        for i in range(1, meta["n_subnets"] + 1):
            get = lambda k: arrays[f"phi{i}.{k}"]  # noqa: E731
            buf = lambda k: arrays[f"buf:phi{i}.{k}"]  # noqa: E731
            subnets.append(
                SubnetParams(
                    spec,
                    [get(f"W{k}") for k in range(n_layers)],
                    [get(f"b{k}") for k in range(n_layers)],
                    [get(f"gamma{k}") for k in range(n_layers)] if bn else [None] * n_layers,
                    [get(f"beta{k}") for k in range(n_layers)] if bn else [None] * n_layers,
                    [buf(f"rmean{k}") for k in range(n_layers)],
                    [buf(f"rvar{k}") for k in range(n_layers)],
                )
            )
    return SolverPolicy(arrays["mu0"], arrays["z0"], subnets, meta["input_layout"]), meta
