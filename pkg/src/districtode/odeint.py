"""Initial-value solvers: fixed-step forward Euler and adaptive Dormand-Prince 5(4).

Dynamics are callables ``f(t, z) -> dz/dt`` on float64 arrays of any shape.
Query times are always solver endpoints; there is no dense output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

DynamicsFn = Callable[[float, np.ndarray], np.ndarray]

# Dormand & Prince (1980) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))


class SolverError(RuntimeError):
    """Integration failure; ``phase`` tells forward from backward (adjoint) solves."""

    def __init__(self, message: str, *, phase: str = "forward", t: float | None = None,
                 step: int | None = None):
        self.phase = phase
        self.t = t
        self.step = step
        super().__init__(f"[{phase}] {message}")


@dataclass(frozen=True)
class SolverConfig:
    method: str = "dopri5"
    rtol: float = 1e-3
    atol: float = 1e-4
    initial_step: float | None = None
    max_steps: int = 10_000
    safety: float = 0.9
    n_steps: int = 100  # euler steps per integration segment

    def __post_init__(self):
        if self.method not in ("euler", "dopri5"):
            raise ValueError(f"unknown method {self.method!r}")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")
        if not 0 < self.safety < 1:
            raise ValueError("safety must lie in (0, 1)")
        if self.max_steps < 1 or self.n_steps < 1:
            raise ValueError("max_steps and n_steps must be positive")
        if self.initial_step is not None and self.initial_step <= 0:
            raise ValueError("initial_step must be positive")

    def with_(self, **kw) -> "SolverConfig":
        return replace(self, **kw)


@dataclass
class Solution:
    times: list[float]
    states: list[np.ndarray]
    stats: dict[str, int] = field(
        default_factory=lambda: {"n_accepted": 0, "n_rejected": 0, "n_fevals": 0}
    )

    def _merge(self, other: dict[str, int]) -> None:
        for k, v in other.items():
            self.stats[k] = self.stats.get(k, 0) + v


def _checked(z: np.ndarray, what: str, *, t: float, step: int, phase: str) -> np.ndarray:
    if not np.all(np.isfinite(z)):
        raise SolverError(f"non-finite {what} at step {step} (t={t:.6g})",
                          phase=phase, t=t, step=step)
    return z


def euler_solve(f: DynamicsFn, z0, t0: float, t1: float, n_steps: int, *,
                phase: str = "forward") -> Solution:
    """``n_steps`` forward Euler steps from t0 to t1 (t1 < t0 allowed)."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    z = np.array(z0, dtype=np.float64)
    dt = (t1 - t0) / n_steps
    for k in range(n_steps):
        t = t0 + k * dt
        z = _checked(z + np.asarray(f(t, z)) * dt, "state", t=t, step=k, phase=phase)
    sol = Solution([t0, t1], [np.array(z0, dtype=np.float64), z])
    sol.stats.update(n_accepted=n_steps, n_fevals=n_steps)
    return sol


def dopri5_step(f: DynamicsFn, t: float, z: np.ndarray, h: float, k1=None):
    """One Dormand-Prince step.

    Returns ``(z_next, error_estimate, f_last)`` where ``z_next`` is the
    fifth-order solution, ``error_estimate`` its elementwise difference from
    the embedded fourth-order one and ``f_last = f(t + h, z_next)`` (FSAL).
    """
    if h == 0:
        raise ValueError("dopri5_step: zero step")
    if k1 is None:
        k1 = np.asarray(f(t, z), dtype=np.float64)
    ks = [k1]
    for i in range(1, 7):
        dz = sum(a * k for a, k in zip(_A[i], ks) if a != 0.0)
        ks.append(np.asarray(f(t + _C[i] * h, z + h * dz), dtype=np.float64))
    # stage 7 is evaluated at the fifth-order solution itself
    z_next = z + h * sum(b * k for b, k in zip(_A[6], ks[:6]) if b != 0.0)
    err = h * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
    if not (np.all(np.isfinite(z_next)) and np.all(np.isfinite(err))):
        raise SolverError(f"non-finite stage at t={t:.6g}", t=t)
    return z_next, err, ks[6]


def _error_norm(err, z, z_next, rtol, atol) -> float:
    scale = atol + rtol * np.maximum(np.abs(z), np.abs(z_next))
    return float(np.sqrt(np.mean(np.square(err / scale))))


def dopri5_solve(f: DynamicsFn, z0, t0: float, t1: float, config: SolverConfig = SolverConfig(),
                 *, k1=None, phase: str = "forward") -> Solution:
    """Adaptive integration from t0 to t1 (either direction).

    ``k1`` may carry ``f(t0, z0)`` from a previous segment; the FSAL stage of
    the final step is exposed as ``solution.f_last``.
    """
    z = np.array(z0, dtype=np.float64)
    sol = Solution([t0, t1], [z.copy(), z])
    sol.f_last = k1
    span = t1 - t0
    if span == 0:
        return sol
    direction = 1.0 if span > 0 else -1.0
    h = abs(config.initial_step if config.initial_step is not None else 1e-2 * span)
    h_min = 1e-14 * abs(span)
    n_acc = n_rej = n_fev = 0
    t = t0
    if k1 is None:
        k1 = np.asarray(f(t, z), dtype=np.float64)
        n_fev += 1
    while direction * (t1 - t) > 0:
        if n_acc + n_rej >= config.max_steps:
            raise SolverError(f"max_steps={config.max_steps} exceeded at t={t:.6g}",
                              phase=phase, t=t, step=n_acc + n_rej)
        if h < h_min:
            raise SolverError(f"step size underflow (h={h:.3g}) at t={t:.6g}",
                              phase=phase, t=t, step=n_acc + n_rej)
        last = h >= abs(t1 - t)
        step = (t1 - t) if last else direction * h
        z_new, err, k7 = dopri5_step(f, t, z, step, k1)
        n_fev += 6
        norm = _error_norm(err, z, z_new, config.rtol, config.atol)
        factor = 5.0 if norm == 0.0 else config.safety * norm ** -0.2
        factor = min(5.0, max(0.2, factor))
        if norm <= 1.0:
            n_acc += 1
            t = t1 if last else t + step
            z, k1 = z_new, k7
            h = abs(step) * factor
        else:
            n_rej += 1
            h = abs(step) * factor
    sol.states[1] = z
    sol.f_last = k1
    sol.stats.update(n_accepted=n_acc, n_rejected=n_rej, n_fevals=n_fev)
    return sol


def integrate(f: DynamicsFn, z0, t0: float, t1: float, config: SolverConfig, *,
              k1=None, phase: str = "forward") -> Solution:
    if config.method == "euler":
        if t1 == t0:
            return Solution([t0, t1], [np.array(z0, dtype=np.float64)] * 2)
        return euler_solve(f, z0, t0, t1, config.n_steps, phase=phase)
    return dopri5_solve(f, z0, t0, t1, config, k1=k1, phase=phase)


def solve_at(f: DynamicsFn, z0, t0: float, times: Sequence[float],
             config: SolverConfig = SolverConfig()) -> Solution:
    """States at each of ``times`` (ascending, all >= t0), restarting at every
    query time so each output is an exact solver endpoint."""
    times = [float(t) for t in times]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("query times must be sorted ascending")
    if times and times[0] < t0:
        raise ValueError("query times must not precede t0")
    out = Solution(list(times), [])
    z = np.array(z0, dtype=np.float64)
    t = t0
    k1 = None
    for tq in times:
        seg = integrate(f, z, t, tq, config, k1=k1)
        out._merge(seg.stats)
        z = seg.states[-1]
        k1 = getattr(seg, "f_last", None)
        t = tq
        out.states.append(z)
    return out
