"""Feedforward subnetworks with batch normalization, Adam and the lr schedule."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class SubnetSpec:
    input_dim: int
    hidden_dims: tuple
    output_dim: int
    activation: str = "relu"
    batchnorm: bool = True
    output_scale: float = 1.0  # fixed multiplier on the last layer, not trained

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"invalid layer sizes in {self}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @classmethod
    def for_dim(cls, d: int, layout: str = "xy", hidden_dims=None) -> "SubnetSpec":
        """Default Z-network: two hidden layers of width d+10, output scaled by 1/d."""
        if layout not in ("xy", "x"):
            raise ValueError(f"input layout must be 'xy' or 'x', got {layout!r}")
        hidden = tuple(hidden_dims) if hidden_dims is not None else (d + 10, d + 10)
        return cls(d + 1 if layout == "xy" else d, hidden, d, output_scale=1.0 / d)

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    def parameter_count(self) -> int:
        dims = self.layer_dims
        n = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
        if self.batchnorm:
            n += 2 * sum(dims[1:])
        return n


@dataclass
class SubnetParams:
    spec: SubnetSpec
    weights: list
    biases: list
    gamma: list
    beta: list
    running_mean: list
    running_var: list

    def trainable(self) -> dict:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{k}"] = w
            out[f"b{k}"] = b
            if self.spec.batchnorm:
                out[f"gamma{k}"] = self.gamma[k]
                out[f"beta{k}"] = self.beta[k]
        return out

    def buffers(self) -> dict:
        out = {}
        for k in range(len(self.weights)):
            out[f"rmean{k}"] = self.running_mean[k]
            out[f"rvar{k}"] = self.running_var[k]
        return out

    def parameter_count(self) -> int:
        return sum(a.size for a in self.trainable().values())


def init_subnet(spec: SubnetSpec, rng: np.random.Generator, scheme: str = "uniform") -> SubnetParams:
    """Draw fresh weights; biases zero, batchnorm at the identity.

    ``uniform`` uses U(-a, a) with a = sqrt(6 / (fan_in + fan_out));
    ``normal`` uses N(0, 2 / fan_in).
    """
    dims = spec.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        if scheme == "uniform":
            a = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-a, a, size=(fan_in, fan_out))
        elif scheme == "normal":
            w = rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        weights.append(w)
        biases.append(np.zeros(fan_out))
    outs = dims[1:]
    return SubnetParams(
        spec,
        weights,
        biases,
        [np.ones(n) for n in outs],
        [np.zeros(n) for n in outs],
        [np.zeros(n) for n in outs],
        [np.ones(n) for n in outs],
    )


def subnet_forward(
    params: SubnetParams,
    inputs,
    mode: str = "eval",
    tape: ad.Tape | None = None,
    prefix: str = "",
    momentum: float = 0.99,
    bn_eps: float = 1e-6,
):
    """Run the subnetwork on a ``(batch, input_dim)`` block.

    Train mode normalizes with batch statistics and folds them into the
    running estimates; eval mode uses the running estimates only.  When a
    tape is given, the trainable arrays are registered on it as leaves named
    ``prefix + name``.
    """
    x = inputs
    width = ad.value(x).shape[-1]
    if width != params.spec.input_dim:
        raise ValueError(f"expected {params.spec.input_dim} input columns, got {width}")
    if mode == "train" and ad.value(x).shape[0] < 2:
        raise ValueError("train mode needs a batch of at least 2")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    if tape is not None:
        p = {k: tape.leaf(v, prefix + k) for k, v in params.trainable().items()}
    else:
        p = params.trainable()
    n_layers = len(params.weights)
    for k in range(n_layers):
        x = ad.add(ad.matmul(x, p[f"W{k}"]), p[f"b{k}"])
        if params.spec.batchnorm:
            if mode == "train":
                raw = ad.value(x)
                mu = raw.mean(axis=0)
                var = np.mean((raw - mu) ** 2, axis=0)
                params.running_mean[k] *= momentum
                params.running_mean[k] += (1.0 - momentum) * mu
                params.running_var[k] *= momentum
                params.running_var[k] += (1.0 - momentum) * var
                x = ad.batchnorm(x, p[f"gamma{k}"], p[f"beta{k}"], eps=bn_eps)
            else:
                inv = 1.0 / np.sqrt(params.running_var[k] + bn_eps)
                x = ad.add(ad.mul(ad.mul(ad.sub(x, params.running_mean[k]), inv), p[f"gamma{k}"]), p[f"beta{k}"])
        if k < n_layers - 1:
            x = ad.relu(x)
    if params.spec.output_scale != 1.0:
        x = ad.scale(x, params.spec.output_scale)
    return x


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict, lr: float):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state, params


@dataclass(frozen=True)
class LrSchedule:
    start_rate: float = 1e-2
    end_rate: float = 1e-3
    decay_interval: int = 100
    total_steps: int = 5000

    def __post_init__(self):
        if not self.start_rate >= self.end_rate > 0:
            raise ValueError("need start_rate >= end_rate > 0")
        if self.decay_interval < 1 or self.total_steps < 0:
            raise ValueError("decay_interval must be >= 1 and total_steps >= 0")

    @property
    def decay_factor(self) -> float:
        events = self.total_steps // self.decay_interval
        if events == 0:
            return 1.0
        return (self.end_rate / self.start_rate) ** (1.0 / events)


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Staircase geometric decay reaching ``end_rate`` at ``total_steps``."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    k = step // schedule.decay_interval
    if k == schedule.total_steps // schedule.decay_interval and k > 0:
        return schedule.end_rate
    return schedule.start_rate * schedule.decay_factor**k


def save_checkpoint(path, arrays: dict, meta: dict) -> None:
    """Write named arrays plus JSON metadata to an ``.npz`` archive."""
    header = dict(meta, format=CHECKPOINT_FORMAT)
    payload = {f"a:{k}": np.asarray(v) for k, v in arrays.items()}
    payload["__meta__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path):
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')}")
        arrays = {k[2:]: z[k].copy() for k in z.files if k.startswith("a:")}
    return arrays, meta
