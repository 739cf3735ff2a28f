import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepfbsde import autodiff as ad


def test_matmul_identity():
    out = ad.record_op(ad.Tape(), "matmul", [np.eye(3), np.array([[1.0], [2.0], [3.0]])])
    np.testing.assert_array_equal(ad.value(out)[:, 0], [1, 2, 3])


def test_relu_definition():
    out = ad.record_op(None, "relu", [np.array([-1.0, 0.0, 2.0])])
    np.testing.assert_array_equal(out, [0, 0, 2])


def test_mean_square():
    tape = ad.Tape()
    x = tape.leaf(np.array([3.0, 4.0]), "x")
    assert ad.mean(ad.square(x)).item() == 12.5


def test_record_op_errors():
    tape = ad.Tape()
    with pytest.raises(ValueError, match="unsupported"):
        ad.record_op(tape, "softmax", [np.ones(2)])
    with pytest.raises(ValueError):
        ad.record_op(tape, "matmul", [np.ones((2, 3)), np.ones((2, 3))])
    with pytest.raises(ValueError):
        ad.record_op(tape, "add", [np.ones(2)])


def test_checked_mode_raises_on_nonfinite():
    tape = ad.Tape(checked=True)
    x = tape.leaf(np.array([-1.0]), "x")
    with pytest.raises(FloatingPointError):
        ad.log(x)


def test_tape_topological_order():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3), "x")
    y = ad.sum(ad.relu(ad.mul(x, x)))
    for k, node in enumerate(tape.nodes):
        assert all(p < k for p in node.parents)
    assert y.node == len(tape.nodes) - 1


def test_backward_sum_gives_ones():
    tape = ad.Tape()
    x = tape.leaf(np.arange(6.0).reshape(2, 3), "x")
    g = ad.backward(tape, ad.sum(x))
    np.testing.assert_array_equal(g["x"], np.ones((2, 3)))


def test_backward_half_norm():
    tape = ad.Tape()
    x = tape.leaf(np.array([3.0, -4.0]), "x")
    g = ad.backward(tape, ad.scale(ad.sum(ad.square(x)), 0.5))
    np.testing.assert_allclose(g["x"], [3.0, -4.0])


def test_backward_unreached_leaf_zero_and_nonscalar_root():
    tape = ad.Tape()
    x = tape.leaf(np.ones(2), "x")
    u = tape.leaf(np.ones((2, 2)), "unused")
    g = ad.backward(tape, ad.sum(x))
    np.testing.assert_array_equal(g["unused"], np.zeros((2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(tape, ad.mul(x, 2.0))
    del u


def test_fanout_accumulates():
    tape = ad.Tape()
    x = tape.leaf(np.array([2.0]), "x")
    y = ad.sum(ad.add(ad.mul(x, x), ad.mul(x, 3.0)))
    assert ad.backward(tape, y)["x"][0] == pytest.approx(7.0)


def test_two_layer_net_fd():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((6, 4))
    params = {"W0": rng.standard_normal((4, 5)), "b0": rng.standard_normal(5), "W1": rng.standard_normal((5, 2))}

    def f(p):
        h = ad.relu(ad.add(ad.matmul(X, p["W0"]), p["b0"]))
        return ad.mean(ad.square(ad.matmul(h, p["W1"])))

    assert ad.finite_diff_check(f, params, eps=1e-6) <= 1e-4


def _fd_primitive(op, shapes, attrs=None, positive=False, seed=0):
    rng = np.random.default_rng(seed)
    params = {f"a{k}": rng.uniform(-2, 2, size=s) for k, s in enumerate(shapes)}
    if positive:
        params = {k: np.abs(v) + 0.5 for k, v in params.items()}
    weight = None

    def f(p):
        nonlocal weight
        out = ad.record_op(None if not isinstance(p["a0"], ad.Tensor) else p["a0"].tape, op, [p[k] for k in sorted(p)], **(attrs or {}))
        if weight is None:
            weight = np.random.default_rng(99).standard_normal(ad.value(out).shape)
        return ad.sum(ad.mul(out, weight))

    return ad.finite_diff_check(f, params, eps=1e-6, floor=1e-8)


@pytest.mark.parametrize(
    "op,shapes,attrs,positive",
    [
        ("add", [(3, 4), (4,)], None, False),
        ("sub", [(3, 4), (3, 1)], None, False),
        ("mul", [(3, 4), (3, 4)], None, False),
        ("div", [(3, 4), (4,)], None, True),
        ("neg", [(5,)], None, False),
        ("scale", [(5,)], {"c": -1.7}, False),
        ("matmul", [(3, 4), (4, 2)], None, False),
        ("relu", [(4, 3)], None, False),
        ("square", [(4, 3)], None, False),
        ("power", [(4,)], {"p": 3.0}, True),
        ("exp", [(4,)], None, False),
        ("log", [(4,)], None, True),
        ("sqrt", [(4,)], None, True),
        ("sin", [(4,)], None, False),
        ("cos", [(4,)], None, False),
        ("tanh", [(4,)], None, False),
        ("sum", [(3, 4)], {"axis": 1, "keepdims": True}, False),
        ("mean", [(3, 4)], {"axis": 0}, False),
        ("reshape", [(3, 4)], {"shape": (2, 6)}, False),
        ("concat", [(3, 2), (3, 1)], {"axis": 1}, False),
        ("batchnorm", [(6, 3), (3,), (3,)], {"eps": 1e-6}, False),
    ],
)
def test_primitive_gradients(op, shapes, attrs, positive):
    assert _fd_primitive(op, shapes, attrs, positive) <= 1e-4


def test_finite_diff_check_examples():
    quad = {"x": np.array([0.3, -1.2, 2.0])}
    assert ad.finite_diff_check(lambda p: ad.sum(ad.square(p["x"])), quad, eps=1e-4) <= 1e-8
    prod = {"a": np.array(2.0), "b": np.array(3.0)}
    tape = ad.Tape()
    a, b = tape.leaf(prod["a"], "a"), tape.leaf(prod["b"], "b")
    g = ad.backward(tape, ad.mul(a, b))
    assert (g["a"], g["b"]) == (3.0, 2.0)
    assert ad.finite_diff_check(lambda p: ad.mul(p["a"], p["b"]), prod) <= 1e-8
    assert ad.finite_diff_check(lambda p: ad.Tensor(np.array(5.0)), {"x": np.ones(3)}) == 0.0
    with pytest.raises(ValueError):
        ad.finite_diff_check(lambda p: p["x"], {"x": np.ones(1)}, eps=0)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_backward_is_linear(a, b, seed):
    x0 = np.random.default_rng(seed).uniform(-2, 2, size=4)

    def grad(fn):
        tape = ad.Tape()
        x = tape.leaf(x0, "x")
        return ad.backward(tape, fn(x))["x"]

    f = lambda x: ad.sum(ad.sin(x))  # noqa: E731
    g = lambda x: ad.sum(ad.square(ad.relu(x)))  # noqa: E731
    combo = grad(lambda x: ad.add(ad.scale(f(x), a), ad.scale(g(x), b)))
    np.testing.assert_allclose(combo, a * grad(f) + b * grad(g), atol=1e-12)


def test_replay_bit_identical():
    x0 = np.random.default_rng(3).standard_normal((5, 3))

    def run():
        tape = ad.Tape()
        x = tape.leaf(x0, "x")
        y = ad.mean(ad.exp(ad.tanh(ad.matmul(x, x.data.T))))
        return y.item(), ad.backward(tape, y)["x"]

    (y1, g1), (y2, g2) = run(), run()
    assert y1 == y2 and np.array_equal(g1, g2)


def test_gaussian_batch():
    z = ad.gaussian_batch(np.random.default_rng(7), 1000, 1000).data
    assert abs(z.mean()) <= 0.005
    assert abs(z.var() - 1.0) <= 0.01
    again = ad.gaussian_batch(np.random.default_rng(7), 1000, 1000).data
    assert np.array_equal(z, again)


def test_plain_arrays_stay_untaped():
    out = ad.add(np.ones(2), np.ones(2))
    assert isinstance(out, np.ndarray)
    t = ad.add(ad.Tensor(np.ones(2)), 1.0)
    assert isinstance(t, ad.Tensor) and t.tape is None
