import math
import warnings
import zlib

import mpmath as mp
import numpy as np
import pytest

from deepfbsde.audit import c_objective, check_conditions, compute_c, compute_L0_L1, gamma0, gamma1
from deepfbsde.problems import ProblemConstants

GENERIC = dict(T=0.5, k_b=0.1, k_f=-0.2, b_y=0.05, sigma_x=0.3, sigma_y=0.02, f_x=0.1, f_z=0.2, g_x=0.1)


def random_constants(rng):
    return ProblemConstants(
        T=rng.uniform(0.1, 1.0),
        k_b=rng.uniform(-0.5, 0.5),
        k_f=rng.uniform(-0.5, 0.5),
        b_y=rng.uniform(0, 0.3),
        sigma_y=rng.uniform(0, 0.3),
        sigma_x=rng.uniform(0, 0.5),
        f_z=rng.uniform(0, 0.5),
        f_x=rng.uniform(0.01, 0.5),
        g_x=rng.uniform(0.01, 0.5),
    )


def test_gamma0():
    assert gamma0(1e-300) == 1.0
    assert gamma0(1e-9) == pytest.approx(1.0, abs=1e-9)
    assert gamma0(1.0) == pytest.approx(math.e - 1, rel=1e-15)
    mp.mp.dps = 40
    assert gamma0(2.0) == pytest.approx(float((mp.e**2 - 1) / 2), rel=1e-15)
    assert gamma0(2.0) == pytest.approx(3.1945280494653251, rel=1e-15)
    # continuous across the series switch
    assert gamma0(1e-6 * (1 - 1e-9)) == pytest.approx(gamma0(1e-6 * (1 + 1e-9)), rel=1e-12)


def test_gamma1_examples():
    assert gamma1(0.0, 1.5) == pytest.approx(gamma0(1.5))
    assert gamma1(-2.0, 1.5) == pytest.approx(gamma0(1.5) * math.exp(-1) / 2)


@pytest.mark.parametrize("x", [-5.0, -2.0, -1.0, -0.3, 0.0, 0.7, 3.0])
def test_gamma1_grid_search(x):
    theta = np.linspace(0, 1, 10**6 + 1)[1:]
    brute = np.max(theta * np.exp(theta * x)) * gamma0(0.8)
    assert gamma1(x, 0.8) == pytest.approx(brute, rel=1e-6)


def test_gamma1_dominates_samples():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x, y = rng.uniform(-5, 5), rng.uniform(0.01, 5)
        theta = rng.uniform(0, 1, 1000)
        assert np.all(gamma1(x, y) >= theta * np.exp(theta * x) * gamma0(y) - 1e-15)


def test_L0_L1_decoupled():
    L0, L1 = compute_L0_L1(ProblemConstants(T=1.0, k_b=1.0, sigma_x=1.0, g_x=1.0, f_x=1.0))
    assert L0 == 0.0 and L1 > 0
    assert compute_L0_L1(ProblemConstants(T=1.0, b_y=1.0, sigma_y=1.0)) == (0.0, 0.0)


def test_L0_L1_high_precision():
    L0, L1 = compute_L0_L1(ProblemConstants(**GENERIC))
    # independent 40-digit evaluation of the closed forms
    mp.mp.dps = 40
    k = {n: mp.mpf(v) for n, v in GENERIC.items()}
    coup = (k["b_y"] + k["sigma_y"]) * (k["g_x"] + k["f_x"] * k["T"]) * k["T"]
    grow = (2 * k["k_b"] + 2 * k["k_f"] + 2 + k["sigma_x"] + k["f_z"]) * k["T"]
    assert L0 == pytest.approx(float(coup * mp.e ** (coup + grow)), rel=1e-14)
    assert L1 == pytest.approx(float((k["g_x"] + k["f_x"] * k["T"]) * max(mp.e ** (coup + grow + 1), 1)), rel=1e-14)
    assert L0 == pytest.approx(0.016667789368537022, rel=1e-14)
    assert L1 == pytest.approx(1.2945071131736300, rel=1e-14)


def test_c_decoupled_limits():
    assert compute_c(ProblemConstants(T=1.0, g_x=1.0, f_x=1.0, sigma_x=1.0)) == (0.0, 1.0)
    assert compute_c(ProblemConstants(T=1.0, b_y=1.0, sigma_y=1.0))[0] == 0.0
    assert np.all(c_objective(np.logspace(-6, 6, 50), ProblemConstants(T=1.0, g_x=1.0, f_x=1.0), 1.0) == 0)


def test_c_generic_frozen():
    c, lam = compute_c(ProblemConstants(**GENERIC))
    assert c == pytest.approx(0.03403509339901687, rel=1e-8)
    assert lam == pytest.approx(5.657139746643929, rel=1e-3)


def test_c_matches_brute_force_grid():
    rng = np.random.default_rng(2024)
    grid = np.logspace(-6, 6, 10**5)
    for _ in range(20):
        k = random_constants(rng)
        L1 = compute_L0_L1(k)[1]
        c, lam = compute_c(k)
        vals = c_objective(grid, k, L1)
        brute = float(vals.min())
        assert abs(c - brute) <= 1e-6 * brute
        assert np.all(c <= vals + 1e-10)
        assert c_objective(lam, k, L1) == pytest.approx(c, rel=1e-12)


def test_c_boundary_warns():
    k = ProblemConstants(T=1.0, b_y=0.1, g_x=1e-14, sigma_x=0.1)
    with pytest.warns(RuntimeWarning, match="boundary"):
        compute_c(k)


def test_check_conditions_examples():
    r = check_conditions(ProblemConstants(T=1.0, k_b=1.0, k_f=0.5, sigma_x=1.0, f_x=1.0, f_z=1.0, g_x=1.0))
    assert r.holds and r.L0 == 0 and r.c == 0
    small = check_conditions(ProblemConstants(**{**GENERIC, "T": 1e-6}))
    assert small.holds and small.L0 < 1e-6 and small.c < 1e-6
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        big = check_conditions(ProblemConstants(T=1.0, b_y=1, sigma_y=1, g_x=1, f_x=1, K=1, sigma_x=1, f_z=1))
    assert not big.holds and big.L0 > 1e3


def test_holds_iff_thresholds():
    rng = np.random.default_rng(5)
    for _ in range(30):
        r = check_conditions(random_constants(rng))
        assert r.holds == (r.L0 < math.exp(-1) and r.c < 1)
        assert r.margin == pytest.approx(min(math.exp(-1) - r.L0, 1 - r.c))
        assert r.L0 >= 0 and r.L1 >= 0 and r.c >= 0


@pytest.mark.parametrize("field", ["b_y", "sigma_y", "g_x", "f_x", "T"])
def test_monotone(field):
    rng = np.random.default_rng(zlib.crc32(field.encode()))
    for _ in range(10):
        k = random_constants(rng)
        bumped = ProblemConstants(**{**k.__dict__, field: getattr(k, field) + rng.uniform(0.01, 0.2)})
        a, b = check_conditions(k), check_conditions(bumped)
        assert b.L0 >= a.L0 * (1 - 1e-12)
        assert b.c >= a.c * (1 - 1e-9)
