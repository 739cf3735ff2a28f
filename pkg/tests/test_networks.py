import math

import numpy as np
import pytest

from deepfbsde import autodiff as ad
from deepfbsde.networks import (
    AdamState,
    LrSchedule,
    SubnetSpec,
    adam_step,
    init_subnet,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    subnet_forward,
)


def test_parameter_count_d100():
    spec = SubnetSpec.for_dim(100)
    assert spec.layer_dims == (101, 110, 110, 100)
    bn = 2 * (110 + 110 + 100)
    expected = 101 * 110 + 110 + 110 * 110 + 110 + 110 * 100 + 100 + bn
    assert spec.parameter_count() == expected
    assert init_subnet(spec, np.random.default_rng(0)).parameter_count() == expected
    assert SubnetSpec.for_dim(100, layout="x").input_dim == 100


def test_init_deterministic_and_bn_identity():
    spec = SubnetSpec.for_dim(4)
    a = init_subnet(spec, np.random.default_rng(5))
    b = init_subnet(spec, np.random.default_rng(5))
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    for g, bt, m, v in zip(a.gamma, a.beta, a.running_mean, a.running_var):
        assert np.all(g == 1) and np.all(bt == 0) and np.all(m == 0) and np.all(v == 1)
    lim = math.sqrt(6 / (5 + 14))
    assert np.all(np.abs(a.weights[0]) <= lim)
    n = init_subnet(spec, np.random.default_rng(5), "normal")
    assert n.weights[0].shape == (5, 14)
    with pytest.raises(ValueError):
        init_subnet(spec, np.random.default_rng(5), "orthogonal")


def test_eval_zero_map():
    spec = SubnetSpec(3, (4,), 2)
    p = init_subnet(spec, np.random.default_rng(0))
    for w in p.weights:
        w[:] = 0
    out = subnet_forward(p, np.random.default_rng(1).standard_normal((5, 3)), "eval")
    assert np.all(out == 0) and out.shape == (5, 2)


def test_train_constant_batch_gives_beta():
    spec = SubnetSpec(2, (3,), 2)
    p = init_subnet(spec, np.random.default_rng(0))
    p.beta[-1][:] = [0.25, -0.5]
    out = subnet_forward(p, np.ones((6, 2)), "train")
    np.testing.assert_allclose(out, np.tile([0.25, -0.5], (6, 1)), atol=1e-12)


def test_train_bn_moments():
    spec = SubnetSpec(3, (8,), 4)
    p = init_subnet(spec, np.random.default_rng(2))
    p.gamma[-1][:] = [1.0, 2.0, 0.5, 3.0]
    p.beta[-1][:] = [0.1, -0.2, 0.3, 0.0]
    out = subnet_forward(p, np.random.default_rng(3).standard_normal((200, 3)), "train")
    np.testing.assert_allclose(out.mean(axis=0), p.beta[-1], atol=1e-6)
    np.testing.assert_allclose(out.var(axis=0), p.gamma[-1] ** 2, rtol=1e-3)


def test_running_stats_converge():
    spec = SubnetSpec(2, (3,), 1)
    p = init_subnet(spec, np.random.default_rng(0))
    data = np.random.default_rng(1).standard_normal((50, 2)) * 3 + 1
    for _ in range(2000):
        subnet_forward(p, data, "train")
    pre = data @ p.weights[0] + p.biases[0]
    np.testing.assert_allclose(p.running_mean[0], pre.mean(axis=0), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(p.running_var[0], pre.var(axis=0), rtol=1e-6)
    assert all(np.all(v > 0) for v in p.running_var)


def test_forward_errors():
    spec = SubnetSpec(3, (4,), 2)
    p = init_subnet(spec, np.random.default_rng(0))
    with pytest.raises(ValueError, match="input columns"):
        subnet_forward(p, np.ones((4, 2)), "eval")
    with pytest.raises(ValueError, match="at least 2"):
        subnet_forward(p, np.ones((1, 3)), "train")


def test_eval_is_pure():
    p = init_subnet(SubnetSpec.for_dim(3), np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((7, 4))
    a = subnet_forward(p, x, "eval")
    b = subnet_forward(p, x, "eval")
    assert np.array_equal(a, b)


def test_output_scale_applied():
    spec = SubnetSpec.for_dim(4)
    assert spec.output_scale == 0.25
    p = init_subnet(spec, np.random.default_rng(0))
    p.gamma[-1][:] = 0
    p.beta[-1][:] = 4.0
    assert np.allclose(subnet_forward(p, np.ones((3, 5)), "eval"), 1.0)


def test_adam_zero_grad_and_lr_to_zero():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    adam_step(state, params, {"w": np.zeros(2)}, 1e-2)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])
    adam_step(state, params, {"w": np.ones(2)}, 1e-300)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])
    assert state.step == 2


def test_adam_constant_gradient_step_size():
    params = {"w": np.zeros(3)}
    state = AdamState()
    prev = params["w"].copy()
    for _ in range(500):
        adam_step(state, params, {"w": np.array([0.5, -3.0, 1e-3])}, 1e-3)
        delta = params["w"] - prev
        prev = params["w"].copy()
    np.testing.assert_allclose(np.abs(delta), 1e-3, rtol=1e-4)
    assert np.all(np.sign(delta) == [-1, 1, -1])


def test_adam_errors_and_determinism():
    with pytest.raises(FloatingPointError, match="'bias'"):
        adam_step(AdamState(), {"bias": np.ones(1)}, {"bias": np.array([np.nan])}, 1e-3)
    with pytest.raises(ValueError):
        adam_step(AdamState(), {"w": np.ones(1)}, {"w": np.ones(1)}, 0.0)

    def run():
        rng = np.random.default_rng(4)
        p = {"w": rng.standard_normal(5)}
        s = AdamState()
        for _ in range(20):
            adam_step(s, p, {"w": rng.standard_normal(5)}, 1e-2)
        return p["w"]

    assert np.array_equal(run(), run())


def test_lr_schedule():
    s = LrSchedule(1e-2, 1e-5, 100, 25000)
    assert lr_at(s, 0) == 1e-2
    assert lr_at(s, 25000) == 1e-5
    assert s.decay_factor == pytest.approx((1e-3) ** (1 / 250), rel=1e-14)
    assert lr_at(s, 99) == 1e-2
    assert lr_at(s, 100) == pytest.approx(1e-2 * (1e-3) ** (1 / 250))
    rates = [lr_at(s, k) for k in range(0, 25001, 50)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    with pytest.raises(ValueError):
        lr_at(s, 25001)
    with pytest.raises(ValueError):
        LrSchedule(1e-3, 1e-2, 100, 100)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.standard_normal((3, 4)), "b": np.arange(5.0)}
    save_checkpoint(tmp_path / "c.npz", arrays, {"seed": 42})
    back, meta = load_checkpoint(tmp_path / "c.npz")
    assert meta["seed"] == 42 and meta["format"] == 1
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes() and back[k].shape == arrays[k].shape


def test_taped_forward_registers_leaves():
    p = init_subnet(SubnetSpec.for_dim(2), np.random.default_rng(0))
    tape = ad.Tape()
    out = subnet_forward(p, np.random.default_rng(1).standard_normal((4, 3)), "train", tape, prefix="phi1.")
    g = ad.backward(tape, ad.sum(ad.square(out)))
    assert set(g) == {"phi1." + k for k in p.trainable()}
