"""Experiment configs, presets, orchestration and plotting.

A config is a TOML file (JSON is accepted too, so a manifest's config echo
can be fed straight back in)::

    schema_version = 1
    mode = "solve"            # solve | converge | audit | oracle | crosscheck
    runs = 1

    [problem]
    name = "example2"
    dim = 10
    params = { sigma = 0.3 }

    [grid]
    N = 40
    N_list = [10, 20, 40, 80] # converge only

    [train]
    iterations = 2000
    lr_start = 1e-2
    lr_end = 1e-3

Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import os
import platform
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .audit import check_conditions
from .networks import LrSchedule
from .oracle import RegressionBasis, lsmc_implicit_solve, oracle_cross_check, write_oracle_csv
from .problems import ProblemConstants, builtin_problem
from .scheme import TimeGrid
from .trainer import TrainConfig, convergence_study, multi_run, save_policy, write_convergence_csv

SCHEMA_VERSION = 1
MODES = ("solve", "converge", "audit", "oracle", "crosscheck")
AUDIT_COLUMNS = ("T", "k_b", "k_f", "K", "b_y", "sigma_x", "sigma_y", "f_x", "f_z", "g_x", "L0", "L1", "c", "lambda1_star", "holds")


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "mode": "solve",
    "runs": 1,
    "out": None,
    "problem": {"name": "linear1d", "dim": None, "params": {}},
    "grid": {"N": 10, "N_list": [10, 20, 40, 80]},
    "train": {
        "iterations": 500,
        "batch_size": 64,
        "validation_paths": 256,
        "lr_start": 1e-2,
        "lr_end": 1e-3,
        "lr_decay_interval": 100,
        "seed": 0,
        "y0_init": [0.0, 1.0],
        "input_layout": "xy",
        "hidden_dims": None,
        "init_scheme": "uniform",
        "checkpoint_every": 100,
        "max_seconds": None,
        "deterministic": False,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "bn_momentum": 0.99,
        "bn_eps": 1e-6,
    },
    "oracle": {"degree": 2, "n_paths": 100000, "picard_tol": 1e-6, "max_sweeps": 20, "seed": 0},
    "audit": {"constants": {"T": 1.0}},
}


def _preset(mode, name, dim, N, iterations, lr, y0_init, runs, **extra):
    cfg = {
        "mode": mode,
        "runs": runs,
        "problem": {"name": name, "dim": dim, "params": {}},
        "grid": {"N": N},
        "train": {"iterations": iterations, "lr_start": lr[0], "lr_end": lr[1], "y0_init": list(y0_init)},
    }
    for k, v in extra.items():
        cfg.setdefault(k, {}).update(v)
    return cfg


PRESETS = {
    "example1-paper": _preset("solve", "example1", 100, 160, 25000, (1e-2, 1e-5), (2.0, 4.0), 5),
    "example2-paper": _preset("solve", "example2", 100, 200, 5000, (1e-2, 1e-3), (0.0, 1.0), 5),
    "example1-desk": _preset("solve", "example1", 10, 40, 3000, (1e-2, 1e-3), (2.0, 4.0), 3),
    "example2-desk": _preset("solve", "example2", 10, 40, 2000, (1e-2, 1e-3), (0.0, 1.0), 3),
    "example2-converge": _preset(
        "converge", "example2", 10, 40, 2000, (1e-2, 1e-3), (0.0, 1.0), 3, grid={"N_list": [10, 20, 40, 80]}
    ),
    "linear1d-smoke": _preset("solve", "linear1d", None, 10, 500, (2e-2, 2e-3), (0.0, 2.0), 1),
    "linear1d-oracle": _preset("oracle", "linear1d", None, 10, 500, (2e-2, 2e-3), (0.0, 2.0), 1, oracle={"degree": 1}),
    "audit-decoupled": {"mode": "audit", "audit": {"constants": {"T": 1.0, "k_b": 1.0, "k_f": 1.0, "K": 1.0, "sigma_x": 1.0, "f_x": 1.0, "f_z": 1.0, "g_x": 1.0}}},
}


def _merge(base, over, path=""):
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(where, "unknown key")
        # free-form tables: problem params and audit constants
        if where in ("problem.params", "audit.constants"):
            if not isinstance(val, dict):
                raise ConfigError(where, "expected a table")
            base[key] = dict(val)
        elif isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(where, "expected a table")
            _merge(base[key], val, where + ".")
        else:
            base[key] = val
    return base


def load_config_text(text: str, fmt: str = "toml") -> dict:
    if fmt == "json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno}", exc.msg) from None
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("syntax", str(exc)) from None


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from None
    raw = load_config_text(text, "json" if path.suffix == ".json" else "toml")
    # a manifest carries the config under "config"
    if "config" in raw and "manifest_version" in raw:
        raw = raw["config"]
    return raw


def resolve_config(raw: dict | None = None, preset: str | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then preset, then file contents, then command-line overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        _merge(cfg, copy.deepcopy(PRESETS[preset]))
    if raw:
        _merge(cfg, raw)
    if overrides:
        _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def _need(cond, field, message):
    if not cond:
        raise ConfigError(field, message)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate_config(cfg: dict) -> None:
    _need(cfg["schema_version"] == SCHEMA_VERSION, "schema_version", f"expected {SCHEMA_VERSION}, got {cfg['schema_version']!r}")
    _need(cfg["mode"] in MODES, "mode", f"must be one of {MODES}")
    _need(_is_int(cfg["runs"]) and cfg["runs"] >= 1, "runs", "must be an integer >= 1")
    p = cfg["problem"]
    _need(isinstance(p["name"], str), "problem.name", "must be a string")
    _need(p["dim"] is None or (_is_int(p["dim"]) and p["dim"] >= 1), "problem.dim", "must be an integer >= 1")
    g = cfg["grid"]
    _need(_is_int(g["N"]) and g["N"] >= 1, "grid.N", f"must be an integer >= 1, got {g['N']!r}")
    _need(
        isinstance(g["N_list"], list) and g["N_list"] and all(_is_int(n) and n >= 1 for n in g["N_list"]),
        "grid.N_list",
        "must be a non-empty list of integers >= 1",
    )
    t = cfg["train"]
    for key in ("iterations", "batch_size", "validation_paths", "lr_decay_interval", "seed", "checkpoint_every"):
        _need(_is_int(t[key]), f"train.{key}", "must be an integer")
    _need(t["iterations"] >= 0, "train.iterations", "must be >= 0")
    _need(t["batch_size"] >= 2, "train.batch_size", "must be >= 2")
    _need(t["validation_paths"] >= 2, "train.validation_paths", "must be >= 2")
    _need(t["checkpoint_every"] >= 1, "train.checkpoint_every", "must be >= 1")
    _need(t["lr_decay_interval"] >= 1, "train.lr_decay_interval", "must be >= 1")
    _need(_is_num(t["lr_end"]) and t["lr_end"] > 0, "train.lr_end", "must be > 0")
    _need(_is_num(t["lr_start"]) and t["lr_start"] >= t["lr_end"], "train.lr_start", "must be >= lr_end")
    y0 = t["y0_init"]
    _need(isinstance(y0, list) and len(y0) == 2 and all(map(_is_num, y0)) and y0[0] <= y0[1], "train.y0_init", "must be [lo, hi] with lo <= hi")
    _need(t["input_layout"] in ("xy", "x"), "train.input_layout", "must be 'xy' or 'x'")
    _need(t["init_scheme"] in ("uniform", "normal"), "train.init_scheme", "must be 'uniform' or 'normal'")
    _need(t["hidden_dims"] is None or (isinstance(t["hidden_dims"], list) and all(_is_int(v) and v >= 1 for v in t["hidden_dims"])), "train.hidden_dims", "must be a list of positive integers")
    _need(t["max_seconds"] is None or (_is_num(t["max_seconds"]) and t["max_seconds"] > 0), "train.max_seconds", "must be > 0")
    _need(isinstance(t["deterministic"], bool), "train.deterministic", "must be true or false")
    o = cfg["oracle"]
    _need(_is_int(o["degree"]) and 0 <= o["degree"] <= 4, "oracle.degree", "must be an integer in [0, 4]")
    _need(_is_int(o["n_paths"]) and o["n_paths"] >= 10, "oracle.n_paths", "must be an integer >= 10")
    _need(_is_num(o["picard_tol"]) and o["picard_tol"] > 0, "oracle.picard_tol", "must be > 0")
    _need(_is_int(o["max_sweeps"]) and o["max_sweeps"] >= 1, "oracle.max_sweeps", "must be >= 1")
    if cfg["mode"] == "audit":
        try:
            ProblemConstants(**cfg["audit"]["constants"])
        except TypeError as exc:
            raise ConfigError("audit.constants", str(exc)) from None
        except ValueError as exc:
            raise ConfigError("audit.constants", str(exc)) from None
    else:
        try:
            build_problem(cfg)
        except (TypeError, ValueError) as exc:
            raise ConfigError("problem", str(exc)) from None


def build_problem(cfg):
    p = cfg["problem"]
    return builtin_problem(p["name"], p["dim"], **p["params"])


def build_train_config(cfg) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        iterations=t["iterations"],
        batch_size=t["batch_size"],
        validation_paths=t["validation_paths"],
        lr=LrSchedule(float(t["lr_start"]), float(t["lr_end"]), t["lr_decay_interval"], t["iterations"]),
        seed=t["seed"],
        y0_init=tuple(float(v) for v in t["y0_init"]),
        input_layout=t["input_layout"],
        hidden_dims=None if t["hidden_dims"] is None else tuple(t["hidden_dims"]),
        init_scheme=t["init_scheme"],
        checkpoint_every=t["checkpoint_every"],
        max_seconds=t["max_seconds"],
        adam_beta1=t["adam_beta1"],
        adam_beta2=t["adam_beta2"],
        adam_eps=t["adam_eps"],
        bn_momentum=t["bn_momentum"],
        bn_eps=t["bn_eps"],
        deterministic=t["deterministic"],
    )


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def write_manifest(out: Path, cfg: dict, artifacts: list, status: str, seeds=None) -> None:
    manifest = {
        "manifest_version": 1,
        "package": "deepfbsde",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "status": status,
        "seeds": seeds or {},
        "config": cfg,
        "artifacts": sorted(artifacts),
    }
    if not cfg["train"]["deterministic"]:
        manifest["platform"] = platform.platform()
    _write_json(out / "manifest.json", manifest)


def write_aggregate_csv(agg, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "mean_val_loss", "sd_val_loss", "mean_rel_error", "sd_rel_error"])
        for j, s in enumerate(agg.steps):
            w.writerow([int(s), *(repr(float(agg.__dict__[k][c][j])) for c in ("val_loss", "rel_error") for k in ("mean", "sd"))])


def write_audit_csv(constants: ProblemConstants, report, path) -> None:
    row = {**{k: getattr(constants, k) for k in AUDIT_COLUMNS[:10]}, **report.to_dict()}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AUDIT_COLUMNS)
        w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in AUDIT_COLUMNS])


@dataclass
class RunResult:
    exit_code: int
    artifacts: list
    summary: dict


def _solve(cfg, out, arts):
    problem = build_problem(cfg)
    grid = TimeGrid(problem.horizon, cfg["grid"]["N"])
    tcfg = build_train_config(cfg)
    agg = multi_run(problem, grid, tcfg, cfg["runs"])
    seeds = {}
    for r, (rep, pol) in enumerate(zip(agg.reports, agg.policies)):
        stem = f"training_run{r}"
        rep.write_csv(out / f"{stem}.csv")
        rep.write_json(out / f"{stem}.json")
        save_policy(out / f"policy_run{r}.npz", pol, rep.seeds["seed"])
        arts += [f"{stem}.csv", f"{stem}.json", f"policy_run{r}.npz"]
        seeds[f"run{r}"] = rep.seeds
    write_aggregate_csv(agg, out / "training_aggregate.csv")
    arts.append("training_aggregate.csv")
    summary = {
        "y0_exact": problem.y0_exact,
        "final_y0": [rep.final.y0_estimate for rep in agg.reports],
        "final_rel_error": [rep.final.rel_error for rep in agg.reports],
        "mean_rel_error": agg.final_mean_rel_error,
        "sd_rel_error": agg.final_sd_rel_error,
        "status": [rep.status for rep in agg.reports],
        "certificate": [rep.to_dict()["certificate"] for rep in agg.reports],
    }
    return summary, seeds, agg.policies


def _oracle(cfg, out, arts):
    problem = build_problem(cfg)
    grid = TimeGrid(problem.horizon, cfg["grid"]["N"])
    o = cfg["oracle"]
    basis = RegressionBasis(o["degree"], problem.dim_x)
    sol = lsmc_implicit_solve(
        problem, grid, basis, o["n_paths"], o["picard_tol"], np.random.default_rng(o["seed"]), o["max_sweeps"]
    )
    write_oracle_csv(sol, out / "oracle_coefficients.csv")
    arts.append("oracle_coefficients.csv")
    summary = {
        "Y0": sol.Y0,
        "Y0_stderr": sol.Y0_stderr,
        "y0_exact": problem.y0_exact,
        "n_paths": sol.n_paths,
        "picard_residuals": [r if math.isfinite(r) else None for r in sol.picard_residuals],
    }
    return summary, sol


def run_experiment(cfg: dict, out) -> RunResult:
    """Dispatch a validated config; artifacts land in ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _need(os.access(out, os.W_OK), "out", f"{out} is not writable")
    arts: list = []
    mode = cfg["mode"]
    seeds = {}
    code = 0
    status = "completed"
    try:
        if mode == "solve":
            summary, seeds, _ = _solve(cfg, out, arts)
        elif mode == "converge":
            problem = build_problem(cfg)
            rows = convergence_study(problem, build_train_config(cfg), cfg["grid"]["N_list"], cfg["runs"])
            write_convergence_csv(rows, out / "convergence.csv")
            arts.append("convergence.csv")
            summary = {"rows": [r.__dict__ for r in rows]}
        elif mode == "audit":
            k = ProblemConstants(**cfg["audit"]["constants"])
            rep = check_conditions(k)
            write_audit_csv(k, rep, out / "audit.csv")
            arts.append("audit.csv")
            summary = {"constants": cfg["audit"]["constants"], **rep.to_dict()}
            code = 0 if rep.holds else 1
        elif mode == "oracle":
            summary, _ = _oracle(cfg, out, arts)
        else:  # crosscheck
            deep, seeds, policies = _solve(cfg, out, arts)
            orc, sol = _oracle(cfg, out, arts)
            problem = build_problem(cfg)
            grid = TimeGrid(problem.horizon, cfg["grid"]["N"])
            checks = [oracle_cross_check(problem, grid, pol, sol).__dict__ for pol in policies]
            summary = {"deep": deep, "oracle": orc, "crosscheck": checks}
    except Exception as exc:
        status = "failed"
        summary = {"error": f"{type(exc).__name__}: {exc}"}
        code = 2
    _write_json(out / "summary.json", {"mode": mode, "status": status, **summary})
    arts.append("summary.json")
    write_manifest(out, cfg, arts + ["manifest.json"], status, seeds)
    return RunResult(code, arts + ["manifest.json"], summary)


def read_csv_columns(path, required) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    for name in required:
        if name not in header:
            raise ValueError(f"{path}: missing column {name!r}")
    cols = {}
    for j, name in enumerate(header):
        vals = []
        for r in rows[1:]:
            try:
                vals.append(float(r[j]))
            except ValueError:
                vals.append(float("nan"))
        cols[name] = np.array(vals)
    return cols


def band_series(tables, column):
    """Steps, mean and population SD of ``column`` across run tables."""
    n = min(len(t["step"]) for t in tables)
    stack = np.stack([t[column][:n] for t in tables])
    return tables[0]["step"][:n], stack.mean(axis=0), stack.std(axis=0)


def emit_plots(paths, out, convergence=None) -> list:
    """SVG charts from training CSVs (and optionally a convergence CSV).

    Each training CSV is one run; the charts show the mean across runs
    with a band of one standard deviation.  Returns the written file names.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if paths:
        tables = [read_csv_columns(p, ("step", "val_loss", "rel_error")) for p in paths]
        for col, fname in (("val_loss", "loss_vs_step.svg"), ("rel_error", "rel_error_vs_step.svg")):
            steps, mean, sd = band_series(tables, col)
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.plot(steps, mean, color="C0")
            lower = mean - sd
            if np.all(mean > 0):
                # log axis; keep the band's lower edge on the chart
                ax.set_yscale("log")
                lower = np.maximum(lower, mean * 1e-3)
            ax.fill_between(steps, lower, mean + sd, color="C0", alpha=0.25, linewidth=0)
            ax.set_xlabel("iteration")
            ax.set_ylabel(col)
            fig.tight_layout()
            fig.savefig(out / fname, format="svg", metadata={"Date": None})
            plt.close(fig)
            written.append(fname)
    if convergence is not None:
        c = read_csv_columns(convergence, ("N", "h", "mean_rel_error", "sd_rel_error"))
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(c["h"], c["mean_rel_error"], marker="o", color="C1")
        ax.fill_between(c["h"], c["mean_rel_error"] - c["sd_rel_error"], c["mean_rel_error"] + c["sd_rel_error"], color="C1", alpha=0.25, linewidth=0)
        ax.set_xlabel("h")
        ax.set_ylabel("relative error of Y0")
        fig.tight_layout()
        fig.savefig(out / "rel_error_vs_h.svg", format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append("rel_error_vs_h.svg")
    return written


__all__ = [
    "AUDIT_COLUMNS",
    "ConfigError",
    "PRESETS",
    "RunResult",
    "build_problem",
    "build_train_config",
    "band_series",
    "emit_plots",
    "load_config_file",
    "read_csv_columns",
    "resolve_config",
    "run_experiment",
]
