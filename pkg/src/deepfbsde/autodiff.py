"""Batched float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation is a *primitive*: a forward function on
numpy arrays plus a vector-Jacobian product.  Operations applied to at
least one taped :class:`Tensor` are appended to that tensor's
:class:`Tape`; operations on plain arrays just return arrays, so the same
coefficient code runs on numpy data and on taped tensors.

Normal sampling uses numpy's ``Generator.standard_normal`` (ziggurat
method, PCG64 bit generator), which is stable for a given seed and build.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "record_op",
    "backward",
    "finite_diff_check",
    "gaussian_batch",
    "PRIMITIVES",
]


class Tensor:
    """A float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __float__(self):
        return self.item()

    def __repr__(self):
        tag = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)


def _not_scalar(t):
    raise ValueError(f"tensor of shape {t.shape} is not a scalar")


@dataclass
class _Node:
    op: str
    parents: tuple  # node index per input, or None for constants
    inputs: tuple  # input arrays
    out: np.ndarray
    attrs: dict


@dataclass
class Tape:
    """Ordered record of primitive applications.

    ``checked=True`` raises ``FloatingPointError`` as soon as a primitive
    produces a NaN or infinity.
    """

    checked: bool = False
    nodes: list = field(default_factory=list)
    leaves: dict = field(default_factory=dict)

    def leaf(self, value, name: str) -> Tensor:
        """Register a trainable input under ``name``."""
        if name in self.leaves:
            raise KeyError(f"leaf {name!r} already registered")
        arr = np.asarray(value, dtype=np.float64)
        self.nodes.append(_Node("leaf", (), (), arr, {}))
        idx = len(self.nodes) - 1
        self.leaves[name] = idx
        return Tensor(arr, self, idx)

    def record(self, op: str, inputs, **attrs) -> Tensor:
        return record_op(self, op, inputs, **attrs)

    def __len__(self):
        return len(self.nodes)


# ---------------------------------------------------------------------------
# primitive table


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _vjp_add(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _vjp_sub(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _vjp_mul(g, out, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _vjp_div(g, out, a, b):
    ga = g / b
    return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)


def _check_matmul(a, b):
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return a @ b


def _vjp_matmul(g, out, a, b):
    if a.ndim == 2 and b.ndim == 2:
        return g @ b.T, a.T @ g
    if a.ndim == 2 and b.ndim == 1:
        return np.outer(g, b), a.T @ g
    if a.ndim == 1 and b.ndim == 2:
        return b @ g, np.outer(a, g)
    raise ValueError("matmul gradient supports 1-D and 2-D operands only")


def _sum_fwd(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims)


def _sum_vjp(g, out, a, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _mean_fwd(a, axis=None, keepdims=False):
    return np.mean(a, axis=axis, keepdims=keepdims)


def _mean_vjp(g, out, a, axis=None, keepdims=False):
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, a.shape).copy(),)


def _concat_fwd(*arrays, axis=0):
    return np.concatenate(arrays, axis=axis)


def _concat_vjp(g, out, *arrays, axis=0):
    cuts = np.cumsum([a.shape[axis] for a in arrays])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _bn_fwd(x, gamma, beta, eps=1e-6):
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"batchnorm needs a 2-D batch of at least 2 rows, got {x.shape}")
    mu = x.mean(axis=0)
    xc = x - mu
    var = np.mean(xc * xc, axis=0)
    xhat = xc / np.sqrt(var + eps)
    return xhat * gamma + beta


def _bn_vjp(g, out, x, gamma, beta, eps=1e-6):
    mu = x.mean(axis=0)
    xc = x - mu
    var = np.mean(xc * xc, axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gbeta = g.sum(axis=0)
    ggamma = np.sum(g * xhat, axis=0)
    gx_hat = g * gamma
    gx = inv * (gx_hat - gx_hat.mean(axis=0) - xhat * np.mean(gx_hat * xhat, axis=0))
    return gx, ggamma, gbeta


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    vjp: Callable
    arity: int | None  # None: variadic


PRIMITIVES: dict[str, Primitive] = {
    "add": Primitive(np.add, _vjp_add, 2),
    "sub": Primitive(np.subtract, _vjp_sub, 2),
    "mul": Primitive(np.multiply, _vjp_mul, 2),
    "div": Primitive(np.divide, _vjp_div, 2),
    "neg": Primitive(np.negative, lambda g, out, a: (-g,), 1),
    "scale": Primitive(lambda a, c=1.0: a * c, lambda g, out, a, c=1.0: (g * c,), 1),
    "matmul": Primitive(_check_matmul, _vjp_matmul, 2),
    "relu": Primitive(lambda a: np.maximum(a, 0.0), lambda g, out, a: (g * (a > 0),), 1),
    "square": Primitive(np.square, lambda g, out, a: (2.0 * a * g,), 1),
    "power": Primitive(lambda a, p=2.0: a**p, lambda g, out, a, p=2.0: (g * p * a ** (p - 1),), 1),
    "exp": Primitive(np.exp, lambda g, out, a: (g * out,), 1),
    "log": Primitive(np.log, lambda g, out, a: (g / a,), 1),
    "sqrt": Primitive(np.sqrt, lambda g, out, a: (g * 0.5 / out,), 1),
    "sin": Primitive(np.sin, lambda g, out, a: (g * np.cos(a),), 1),
    "cos": Primitive(np.cos, lambda g, out, a: (-g * np.sin(a),), 1),
    "tanh": Primitive(np.tanh, lambda g, out, a: (g * (1.0 - out * out),), 1),
    "sum": Primitive(_sum_fwd, _sum_vjp, 1),
    "mean": Primitive(_mean_fwd, _mean_vjp, 1),
    "reshape": Primitive(lambda a, shape=(): a.reshape(shape), lambda g, out, a, shape=(): (g.reshape(a.shape),), 1),
    "concat": Primitive(_concat_fwd, _concat_vjp, None),
    "batchnorm": Primitive(_bn_fwd, _bn_vjp, 3),
}


def record_op(tape: Tape | None, op: str, inputs, **attrs):
    """Apply primitive ``op`` to ``inputs``, recording it on ``tape``.

    Inputs may be Tensors (taped or not), arrays or Python scalars.  With
    ``tape=None`` the forward value is returned as a plain array.
    """
    prim = PRIMITIVES.get(op)
    if prim is None:
        raise ValueError(f"unsupported primitive {op!r}")
    if prim.arity is not None and len(inputs) != prim.arity:
        raise ValueError(f"{op} takes {prim.arity} inputs, got {len(inputs)}")
    arrays = []
    parents = []
    for x in inputs:
        if isinstance(x, Tensor):
            arrays.append(x.data)
            if x.tape is not None:
                if x.tape is not tape:
                    raise ValueError("inputs recorded on a different tape")
                parents.append(x.node)
            else:
                parents.append(None)
        else:
            arrays.append(np.asarray(x, dtype=np.float64))
            parents.append(None)
    quiet = tape is not None and tape.checked
    try:
        with np.errstate(all="ignore") if quiet else contextlib.nullcontext():
            out = prim.forward(*arrays, **attrs)
    except ValueError as exc:
        raise ValueError(f"{op}: {exc}") from None
    out = np.asarray(out, dtype=np.float64)
    if tape is None:
        return out
    if tape.checked and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite output from {op} at node {len(tape.nodes)}")
    if all(p is None for p in parents):
        return Tensor(out)
    tape.nodes.append(_Node(op, tuple(parents), tuple(arrays), out, attrs))
    return Tensor(out, tape, len(tape.nodes) - 1)


def _apply(op, *inputs, **attrs):
    tape = None
    for x in inputs:
        if isinstance(x, Tensor) and x.tape is not None:
            tape = x.tape
            break
    if tape is None:
        out = record_op(None, op, inputs, **attrs)
        if any(isinstance(x, Tensor) for x in inputs):
            return Tensor(out)
        return out
    return record_op(tape, op, inputs, **attrs)


def backward(tape: Tape, root: Tensor) -> dict[str, np.ndarray]:
    """Gradients of scalar ``root`` with respect to every registered leaf."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    grads: list = [None] * len(tape.nodes)
    if root.tape is tape and root.node is not None:
        grads[root.node] = np.ones_like(root.data)
        start = root.node
    else:
        start = -1
    nodes = tape.nodes
    for i in range(start, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if not node.parents:
            continue
        parts = PRIMITIVES[node.op].vjp(g, node.out, *node.inputs, **node.attrs)
        for p, gp in zip(node.parents, parts):
            if p is None:
                continue
            grads[p] = gp if grads[p] is None else grads[p] + gp
        grads[i] = None if i != start else g
    out = {}
    for name, idx in tape.leaves.items():
        g = grads[idx]
        out[name] = np.zeros_like(nodes[idx].out) if g is None else np.asarray(g).reshape(nodes[idx].out.shape)
    return out


def finite_diff_check(f, params: dict, eps: float = 1e-6, floor: float = 1e-12) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` maps a dict of inputs (Tensors when taped, arrays otherwise) to a
    scalar.  The gap per coordinate is ``|fd - g| / (|g| + floor)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    leaves = {k: tape.leaf(v, k) for k, v in base.items()}
    root = f(leaves)
    grads = backward(tape, root if isinstance(root, Tensor) else Tensor(root))
    worst = 0.0
    for name, value in base.items():
        flat = value.reshape(-1)
        gflat = grads[name].reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + eps
            fp = float(np.asarray(_value(f(base))))
            flat[j] = keep - eps
            fm = float(np.asarray(_value(f(base))))
            flat[j] = keep
            fd = (fp - fm) / (2.0 * eps)
            worst = max(worst, abs(fd - gflat[j]) / (abs(gflat[j]) + floor))
    return worst


def _value(x):
    return x.data if isinstance(x, Tensor) else x


def gaussian_batch(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    """i.i.d. standard normal ``(rows, cols)`` block drawn from ``rng``."""
    return Tensor(rng.standard_normal((rows, cols)))


# ---------------------------------------------------------------------------
# functional front end


def add(a, b):
    return _apply("add", a, b)


def sub(a, b):
    return _apply("sub", a, b)


def mul(a, b):
    return _apply("mul", a, b)


def div(a, b):
    return _apply("div", a, b)


def neg(a):
    return _apply("neg", a)


def scale(a, c: float):
    return _apply("scale", a, c=float(c))


def matmul(a, b):
    return _apply("matmul", a, b)


def relu(a):
    return _apply("relu", a)


def square(a):
    return _apply("square", a)


def power(a, p: float):
    return _apply("power", a, p=float(p))


def exp(a):
    return _apply("exp", a)


def log(a):
    return _apply("log", a)


def sqrt(a):
    return _apply("sqrt", a)


def sin(a):
    return _apply("sin", a)


def cos(a):
    return _apply("cos", a)


def tanh(a):
    return _apply("tanh", a)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    return _apply("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return _apply("mean", a, axis=axis, keepdims=keepdims)


def reshape(a, shape):
    return _apply("reshape", a, shape=tuple(shape))


def concat(items, axis=0):
    return _apply("concat", *items, axis=axis)


def batchnorm(x, gamma, beta, eps=1e-6):
    """Train-mode batch normalization over axis 0 (batch statistics)."""
    return _apply("batchnorm", x, gamma, beta, eps=float(eps))


def value(x) -> np.ndarray:
    """Underlying array of a Tensor or array-like."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
