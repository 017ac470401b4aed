import gc
import math
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from districtode import ad
from districtode.ad import ShapeError
from districtode.adjoint import (
    AugmentedState,
    adjoint_backward,
    adjoint_sweep,
    bptt_gradients,
    loss_output_cotangent,
)
from districtode.gradcheck import (
    TIGHT,
    check_adjoint_vs_bptt,
    check_adjoint_vs_fd,
    random_mlp_dynamics,
)
from districtode.odeint import SolverConfig, dopri5_solve, euler_solve


def scalar_linear(t, z, th):
    return ad.mul(z, th["theta"])


THETA = {"theta": np.array([0.5])}


def test_augmented_state_round_trip():
    rng = np.random.default_rng(0)
    s = AugmentedState(rng.standard_normal((2, 3)), rng.standard_normal((2, 3)),
                       {"W": rng.standard_normal((3, 3)), "b": rng.standard_normal(3)})
    flat = s.flatten()
    assert flat.size == 2 * 6 + 12
    back = AugmentedState.unflatten(flat, (2, 3), {"W": (3, 3), "b": (3,)})
    assert back.flatten().tobytes() == flat.tobytes()
    with pytest.raises(ShapeError):
        AugmentedState.unflatten(flat[:-1], (2, 3), {"W": (3, 3), "b": (3,)})


def test_loss_cotangent_examples():
    assert not loss_output_cotangent([0.3, 0.7], [0.3, 0.7], 2).any()
    assert loss_output_cotangent([1.0], [0.0], 1)[0] == 2.0
    assert loss_output_cotangent([0.5], [1.0], 4)[0] == -0.25
    with pytest.raises(ShapeError):
        loss_output_cotangent([1.0, 2.0], [1.0], 2)


def test_zero_cotangent_gives_zero():
    res = adjoint_backward(scalar_linear, np.array([math.exp(0.5)]), np.zeros(1), 1.0, 0.0, THETA)
    assert not res.theta["theta"].any() and not res.z0.any()


def test_scalar_closed_form():
    z1 = dopri5_solve(lambda t, z: 0.5 * z, np.ones(1), 0.0, 1.0, TIGHT).states[-1]
    res = adjoint_backward(scalar_linear, z1, np.ones(1), 1.0, 0.0, THETA, TIGHT)
    assert res.theta["theta"][0] == pytest.approx(math.exp(0.5), rel=1e-6)
    assert res.z0[0] == pytest.approx(math.exp(0.5), rel=1e-6)
    assert res.theta["theta"][0] == pytest.approx(1.648721, abs=1e-5)


def test_z_independent_dynamics_keep_adjoint():
    f = lambda t, z, th: ad.add(ad.scale(z, 0.0), th["c"])
    a1 = np.array([0.3, -1.2])
    res = adjoint_backward(f, np.zeros(2), a1, 1.0, 0.0, {"c": np.array([1.0, 2.0])})
    np.testing.assert_allclose(res.z0, a1, rtol=0, atol=1e-15)
    # dL/dc = integral of a over [0, 1]
    np.testing.assert_allclose(res.theta["c"], a1, rtol=1e-12)


def test_zero_dynamics_time_reversal():
    f = lambda t, z, th: ad.scale(ad.mul(z, th["w"]), 0.0)
    a1 = np.array([0.7, 0.1])
    res = adjoint_backward(f, np.ones(2), a1, 1.0, 0.0, {"w": np.ones(2)})
    assert np.array_equal(res.z0, a1)
    assert not res.theta["w"].any()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000))
def test_linear_in_seed(seed):
    f, theta, z0 = random_mlp_dynamics(seed)
    z1 = dopri5_solve(lambda t, z: f(t, z, theta), z0, 0.0, 1.0, SolverConfig()).states[-1]
    a = np.random.default_rng(seed).standard_normal(3)
    r1 = adjoint_backward(f, z1, a, 1.0, 0.0, theta)
    r2 = adjoint_backward(f, z1, 2 * a, 1.0, 0.0, theta)
    np.testing.assert_allclose(r2.z0, 2 * r1.z0, rtol=0, atol=1e-12 * max(1, np.abs(r1.z0).max()))
    for k in theta:
        scale = max(1.0, np.abs(r1.theta[k]).max())
        np.testing.assert_allclose(r2.theta[k], 2 * r1.theta[k], rtol=0, atol=1e-12 * scale)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        adjoint_backward(scalar_linear, np.ones(1), np.ones(2), 1.0, 0.0, THETA)


def test_bptt_single_step():
    # L = c * (z0 + theta*z0*dt): dL/dtheta = c*z0*dt, dL/dz0 = c*(1 + theta*dt)
    res = bptt_gradients(scalar_linear, np.array([2.0]), 0.0, 0.5, 1, np.array([3.0]), THETA)
    assert res.theta["theta"][0] == pytest.approx(3.0 * 2.0 * 0.5)
    assert res.z0[0] == pytest.approx(3.0 * (1 + 0.5 * 0.5))


def test_bptt_closed_form():
    res = bptt_gradients(scalar_linear, np.ones(1), 0.0, 1.0, 1000, np.ones(1), THETA)
    assert abs(res.theta["theta"][0] - math.exp(0.5)) / math.exp(0.5) < 1e-2


def test_bptt_cap():
    with pytest.raises(MemoryError):
        bptt_gradients(scalar_linear, np.ones(1), 0.0, 1.0, 11, np.ones(1), THETA, max_steps=10)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_adjoint_matches_bptt(seed):
    r = check_adjoint_vs_bptt(seed)
    assert r.error < 1e-6, r.line()


@pytest.mark.parametrize("seed", [0, 3])
def test_adjoint_matches_finite_differences(seed):
    r = check_adjoint_vs_fd(seed)
    assert r.error < 1e-3, r.line()


def test_sabotaged_adjoint_is_detected():
    assert not check_adjoint_vs_fd(0, sign=-1.0).passed
    assert not check_adjoint_vs_bptt(0, sign=-1.0).passed


def test_multi_observation_matches_bptt():
    f, theta, z0 = random_mlp_dynamics(4)
    n = 100
    cfg = SolverConfig(method="euler", n_steps=n)
    rng = np.random.default_rng(9)
    c_mid, c_end = rng.standard_normal(3), rng.standard_normal(3)
    z_mid = euler_solve(lambda t, z: f(t, z, theta), z0, 0.0, 0.5, n).states[-1]
    z_end = euler_solve(lambda t, z: f(t, z, theta), z_mid, 0.5, 1.0, n).states[-1]
    res = adjoint_sweep(f, z_end, 1.0, theta, [(0.5, c_mid), (1.0, c_end)], 0.0, cfg)

    # reference: tape through both segments with L = c_mid.z(0.5) + c_end.z(1)
    tape = ad.Tape()
    z = tape.leaf(z0, name="z0")
    tv = {k: tape.leaf(v, name=k) for k, v in theta.items()}
    mid = None
    for seg in range(2):
        for k in range(n):
            z = ad.add(z, ad.scale(f(0.0, z, tv), 0.5 / n))
        if seg == 0:
            mid = z
    grads = tape.gradients({mid: c_mid, z: c_end})
    np.testing.assert_allclose(res.z0, grads["z0"], rtol=1e-9, atol=1e-12)
    for k in theta:
        np.testing.assert_allclose(res.theta[k], grads[k], rtol=1e-9, atol=1e-12)


def test_observation_outside_range():
    with pytest.raises(ValueError):
        adjoint_sweep(scalar_linear, np.ones(1), 1.0, THETA, [(1.5, np.ones(1))], 0.0)


def _peak_bytes(n_steps):
    f, theta, z0 = random_mlp_dynamics(0)
    cfg = SolverConfig(method="euler", n_steps=n_steps)
    z1 = euler_solve(lambda t, z: f(t, z, theta), z0, 0.0, 1.0, n_steps).states[-1]
    a1 = np.ones(3)
    gc.disable()  # a full collection empties CPython's free lists mid-measurement
    try:
        for _ in range(2):
            adjoint_backward(f, z1, a1, 1.0, 0.0, theta, cfg)
        tracemalloc.start()
        base = tracemalloc.get_traced_memory()[0]
        adjoint_backward(f, z1, a1, 1.0, 0.0, theta, cfg)
        peak = tracemalloc.get_traced_memory()[1] - base
        tracemalloc.stop()
    finally:
        gc.enable()
    return peak


def test_memory_is_independent_of_steps():
    small, large = _peak_bytes(10), _peak_bytes(1000)
    assert large <= 2 * small, (small, large)


def test_bptt_memory_grows():
    f, theta, z0 = random_mlp_dynamics(0)

    def peak(n):
        tracemalloc.start()
        bptt_gradients(f, z0, 0.0, 1.0, n, np.ones(3), theta)
        p = tracemalloc.get_traced_memory()[1]
        tracemalloc.stop()
        return p

    assert peak(1000) > 10 * peak(10)
