"""Deep BSDE solver for coupled forward-backward SDEs, with an a-posteriori
error certificate, a weak-coupling conditions auditor and a regression
Monte Carlo oracle for low-dimensional validation."""

__version__ = "0.1.0"

from .audit import AuditReport, check_conditions, compute_c, compute_L0_L1, gamma0, gamma1
from .oracle import RegressionBasis, lsmc_implicit_solve, oracle_cross_check
from .problems import FbsdeProblem, ProblemConstants, builtin_problem
from .scheme import TimeGrid, certificate, init_policy, objective, rollout
from .trainer import TrainConfig, multi_run, train

__all__ = [
    "AuditReport",
    "FbsdeProblem",
    "ProblemConstants",
    "RegressionBasis",
    "TimeGrid",
    "TrainConfig",
    "builtin_problem",
    "certificate",
    "check_conditions",
    "compute_L0_L1",
    "compute_c",
    "gamma0",
    "gamma1",
    "init_policy",
    "lsmc_implicit_solve",
    "multi_run",
    "objective",
    "oracle_cross_check",
    "rollout",
    "train",
]
