import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from districtode.odeint import (
    SolverConfig,
    SolverError,
    dopri5_solve,
    dopri5_step,
    euler_solve,
    solve_at,
)

DEFAULT = SolverConfig()


def decay(t, z):
    return -z


def growth(t, z):
    return z


def test_config_validation():
    for bad in [dict(rtol=0), dict(atol=-1), dict(safety=1.0), dict(max_steps=0), dict(method="rk4")]:
        with pytest.raises(ValueError):
            SolverConfig(**bad)


def test_euler_constant_dynamics():
    c = np.array([1.5, -2.0])
    assert np.array_equal(euler_solve(lambda t, z: np.zeros_like(z), c, 0.0, 1.0, 7).states[-1], c)


@pytest.mark.parametrize("n", [1, 3, 10])
def test_euler_exact_on_constant_rate(n):
    z = euler_solve(lambda t, z: np.ones_like(z), np.zeros(1), 0.0, 1.0, n).states[-1]
    assert z[0] == pytest.approx(1.0, abs=1e-15)


def test_euler_compound_product():
    z = euler_solve(growth, np.ones(1), 0.0, 1.0, 1000).states[-1][0]
    assert z == pytest.approx((1 + 1 / 1000) ** 1000, rel=1e-13)
    assert z == pytest.approx(2.716924, abs=1e-6)


def test_euler_negative_direction():
    z = euler_solve(growth, np.ones(1), 1.0, 0.0, 1000).states[-1][0]
    assert z == pytest.approx((1 - 1 / 1000) ** 1000, rel=1e-13)


def test_euler_rejects_zero_steps():
    with pytest.raises(ValueError):
        euler_solve(growth, np.ones(1), 0, 1, 0)


def test_euler_non_finite_reports_step():
    with pytest.raises(SolverError, match="step"):
        euler_solve(lambda t, z: z * 1e300, np.array([1e10]), 0, 1, 10)


@pytest.mark.parametrize("n", [10, 50, 200])
def test_euler_first_order(n):
    err = lambda m: abs(euler_solve(growth, np.ones(1), 0, 1, m).states[-1][0] - math.e)
    assert 1.8 <= err(n) / err(2 * n) <= 2.2


def test_dopri5_step_zero_dynamics():
    z = np.array([1.0, 2.0])
    zn, err, _ = dopri5_step(lambda t, z: np.zeros_like(z), 0.0, z, 0.1)
    assert np.array_equal(zn, z) and not err.any()


def test_dopri5_step_taylor():
    lam, h = 2.0, 0.05
    zn, _, _ = dopri5_step(lambda t, z: lam * z, 0.0, np.ones(1), h)
    x = lam * h
    taylor = sum(x**k / math.factorial(k) for k in range(6))
    assert abs(zn[0] - taylor) < 2 * x**6


def test_dopri5_step_linear_in_time_is_exact():
    zn, err, f_last = dopri5_step(lambda t, z: np.full_like(z, t), 0.3, np.zeros(1), 0.2)
    assert zn[0] == pytest.approx((0.5**2 - 0.3**2) / 2, abs=1e-15)
    assert abs(err[0]) < 1e-16
    assert f_last[0] == pytest.approx(0.5)


def test_dopri5_step_zero_h():
    with pytest.raises(ValueError):
        dopri5_step(growth, 0.0, np.ones(1), 0.0)


def test_dopri5_decay_accuracy_and_stats():
    sol = dopri5_solve(decay, np.ones(1), 0.0, 1.0, DEFAULT)
    assert abs(sol.states[-1][0] - math.exp(-1)) / math.exp(-1) < 1e-3
    s = sol.stats
    assert s["n_fevals"] == 6 * (s["n_accepted"] + s["n_rejected"]) + 1


def test_dopri5_harmonic_oscillator():
    f = lambda t, z: np.array([z[1], -z[0]])
    z = dopri5_solve(f, np.array([1.0, 0.0]), 0.0, 2 * math.pi, DEFAULT).states[-1]
    assert np.allclose(z, [1.0, 0.0], atol=1e-2)
    assert abs(np.hypot(*z) - 1.0) < 1e-3


def test_dopri5_empty_interval():
    sol = dopri5_solve(decay, np.array([3.0]), 0.4, 0.4, DEFAULT)
    assert sol.states[-1][0] == 3.0
    assert sol.stats["n_accepted"] == 0


def test_dopri5_max_steps():
    with pytest.raises(SolverError, match="max"):
        dopri5_solve(decay, np.ones(1), 0, 10, DEFAULT.with_(max_steps=3, initial_step=1e-3))


def test_dopri5_step_underflow():
    # finite-time blow-up at t=1 forces the step size to collapse
    with pytest.raises(SolverError):
        dopri5_solve(lambda t, z: z * z, np.ones(1), 0.0, 2.0, DEFAULT.with_(max_steps=100_000))


def test_tightening_rtol_does_not_increase_error():
    errs = []
    for rtol in [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7]:
        z = dopri5_solve(decay, np.ones(1), 0, 1, SolverConfig(rtol=rtol, atol=rtol / 10)).states[-1][0]
        errs.append(abs(z - math.exp(-1)))
    assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_backward_then_forward_returns():
    A = np.array([[-0.5, 1.0], [-1.0, -0.2]])
    f = lambda t, z: A @ z
    z0 = np.array([0.8, -0.3])
    back = dopri5_solve(f, z0, 1.0, 0.0, DEFAULT).states[-1]
    again = dopri5_solve(f, back, 0.0, 1.0, DEFAULT).states[-1]
    assert np.all(np.abs(again - z0) <= 10 * (DEFAULT.atol + DEFAULT.rtol * np.abs(z0)))


def _single_step_error_ratio(h):
    e = lambda step: abs(dopri5_step(growth, 0.0, np.ones(1), step)[1][0])
    return e(h) / e(h / 2)


@pytest.mark.parametrize("h", [0.2, 0.1, 0.05])
def test_order_signature(h):
    assert 24 <= _single_step_error_ratio(h) <= 40


def test_solve_at_single_time():
    sol = solve_at(growth, np.ones(1), 0.0, [0.0], DEFAULT)
    assert sol.states[0][0] == 1.0


def test_solve_at_growth():
    sol = solve_at(growth, np.ones(1), 0.0, [0.0, 0.5, 1.0], DEFAULT)
    for t, z in zip([0.0, 0.5, 1.0], sol.states):
        assert abs(z[0] - math.exp(t)) / math.exp(t) < DEFAULT.rtol
    s = sol.stats
    assert s["n_fevals"] == 6 * (s["n_accepted"] + s["n_rejected"]) + 1


def test_solve_at_matches_single_shot():
    seg = solve_at(decay, np.ones(1), 0.0, [0.3, 0.6, 1.0], DEFAULT).states[-1][0]
    one = dopri5_solve(decay, np.ones(1), 0.0, 1.0, DEFAULT).states[-1][0]
    tol = DEFAULT.atol + DEFAULT.rtol * math.exp(-1)
    assert abs(seg - one) <= 2 * tol


def test_solve_at_rejects_unsorted_and_early():
    with pytest.raises(ValueError):
        solve_at(growth, np.ones(1), 0.0, [0.5, 0.2], DEFAULT)
    with pytest.raises(ValueError):
        solve_at(growth, np.ones(1), 0.5, [0.2], DEFAULT)


def test_solve_at_euler_method():
    cfg = SolverConfig(method="euler", n_steps=100)
    sol = solve_at(growth, np.ones(1), 0.0, [0.5, 1.0], cfg)
    assert sol.states[-1][0] == pytest.approx((1 + 0.005) ** 200, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(-2.0, 2.0), st.floats(0.1, 3.0))
def test_linear_scalar_within_tolerance(lam, t1):
    z = dopri5_solve(lambda t, z: lam * z, np.ones(1), 0.0, t1, DEFAULT).states[-1][0]
    exact = math.exp(lam * t1)
    assert abs(z - exact) <= 20 * (DEFAULT.atol + DEFAULT.rtol * exact)
