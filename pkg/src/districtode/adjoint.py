"""Gradients through ODE solves.

:func:`adjoint_backward` integrates the augmented state ``[z; a; g]``
backward in time, re-deriving the trajectory instead of storing it, so
memory does not grow with the number of solver steps.
:func:`bptt_gradients` unrolls forward Euler on a tape and backpropagates
through every step; it exists to cross-check the adjoint.

Dynamics here take parameters explicitly, ``f(t, z, theta)`` with ``theta``
a mapping of name -> array, and must be written with :mod:`districtode.ad`
primitives so they can be traced.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import ad
from .ad import ShapeError
from .odeint import SolverConfig, SolverError, dopri5_solve

ParamDynamicsFn = Callable[[float, object, Mapping[str, object]], object]

_Z = "__z__"


@dataclass
class AugmentedState:
    z: np.ndarray
    a: np.ndarray
    g: dict[str, np.ndarray]

    def flatten(self) -> np.ndarray:
        parts = [self.z.reshape(-1), self.a.reshape(-1)]
        parts += [v.reshape(-1) for v in self.g.values()]
        return np.concatenate(parts)

    @classmethod
    def unflatten(cls, flat: np.ndarray, z_shape, g_shapes: Mapping[str, tuple]) -> "AugmentedState":
        n = int(np.prod(z_shape))
        total = 2 * n + sum(int(np.prod(s)) for s in g_shapes.values())
        if flat.size != total:
            raise ShapeError("augmented state", flat.shape, (total,))
        z = flat[:n].reshape(z_shape)
        a = flat[n : 2 * n].reshape(z_shape)
        g = {}
        pos = 2 * n
        for name, shape in g_shapes.items():
            size = int(np.prod(shape))
            g[name] = flat[pos : pos + size].reshape(shape)
            pos += size
        return cls(z, a, g)


@dataclass
class GradResult:
    theta: dict[str, np.ndarray]
    z0: np.ndarray


def loss_output_cotangent(pred, target, n_total: int) -> np.ndarray:
    """d/dpred of sum((pred - target)^2) / n_total."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError("loss_output_cotangent", pred.shape, target.shape)
    return 2.0 * (pred - target) / n_total


def _traced_vjp(f: ParamDynamicsFn, t: float, z: np.ndarray, theta: Mapping[str, np.ndarray],
                a: np.ndarray, sign: float = 1.0):
    """f(t, z), a.df/dz and a.df/dtheta from one taped forward and one reverse sweep."""
    tape = ad.Tape()
    zv = tape.leaf(z, name=_Z)
    tv = {k: tape.leaf(v, name=k) for k, v in theta.items()}
    out = f(t, zv, tv)
    if not isinstance(out, ad.Var):
        out = tape.const(out)
    if out.shape != z.shape:
        raise ShapeError("dynamics output", out.shape, z.shape)
    grads = tape.gradients({out: sign * a})
    return out.value, grads


def _augmented_rhs(f, theta, z_shape, g_shapes, counter, sign):
    def rhs(t, s):
        st = AugmentedState.unflatten(s, z_shape, g_shapes)
        counter[0] += 1
        fz, grads = _traced_vjp(f, t, st.z, theta, st.a, sign)
        parts = [fz.reshape(-1), -grads[_Z].reshape(-1)]
        parts += [-grads[k].reshape(-1) for k in g_shapes]
        return np.concatenate(parts)

    return rhs


def _reverse_euler(f, theta, z, a, g, t_hi, t_lo, n_steps, sign):
    """Exact reverse of ``n_steps`` forward Euler steps over [t_lo, t_hi].

    The state before each step is recovered from the state after it by
    fixed-point iteration on z_k = z_{k+1} - h f(t_k, z_k); the adjoint and
    parameter channels then take the matching Euler update. This reproduces
    backpropagation through the forward Euler loop without storing it.
    """
    h = (t_hi - t_lo) / n_steps
    for k in range(n_steps - 1, -1, -1):
        t_k = t_lo + k * h
        z_next = z
        zk = z_next - h * np.asarray(f(t_k, z_next, theta))
        for _ in range(200):
            z_new = z_next - h * np.asarray(f(t_k, zk, theta))
            delta = float(np.max(np.abs(z_new - zk))) if z_new.size else 0.0
            zk = z_new
            if delta <= 1e-15 * (1.0 + float(np.max(np.abs(zk)))):
                break
        else:
            if not delta <= 1e-10 * (1.0 + float(np.max(np.abs(zk)))):
                raise SolverError(f"reverse Euler step did not converge at t={t_k:.6g}",
                                  phase="backward", t=t_k, step=k)
        if not np.all(np.isfinite(zk)):
            raise SolverError(f"non-finite state at step {k}", phase="backward", t=t_k, step=k)
        _, grads = _traced_vjp(f, t_k, zk, theta, a, sign)
        a = a + h * grads[_Z]
        for name in g:
            g[name] = g[name] + h * grads[name]
        z = zk
    return z, a, g


def adjoint_sweep(f: ParamDynamicsFn, z_end, t_end: float, theta: Mapping[str, np.ndarray],
                  observations: Sequence[tuple[float, np.ndarray]], t0: float,
                  config: SolverConfig = SolverConfig(), *, sign: float = 1.0,
                  stats: dict | None = None) -> GradResult:
    """Backward sweep with cotangent injections at observation times.

    ``observations`` is a list of ``(t_j, dL/dz(t_j))`` with every
    ``t0 <= t_j <= t_end``. Integration runs segment by segment from
    ``t_end`` down to ``t0``; at each ``t_j`` the adjoint jumps by the
    observation's cotangent. ``sign=-1`` flips the vector-Jacobian products
    (a deliberately wrong adjoint, used to exercise failure paths).
    """
    z = np.array(z_end, dtype=np.float64)
    theta = {k: np.asarray(v, dtype=np.float64) for k, v in theta.items()}
    obs = sorted(((float(t), np.asarray(c, dtype=np.float64)) for t, c in observations),
                 key=lambda p: -p[0])
    for t, c in obs:
        if c.shape != z.shape:
            raise ShapeError("adjoint cotangent", c.shape, z.shape)
        if not t0 <= t <= t_end:
            raise ValueError(f"observation time {t} outside [{t0}, {t_end}]")
    a = np.zeros_like(z)
    g = {k: np.zeros_like(v) for k, v in theta.items()}
    g_shapes = {k: v.shape for k, v in theta.items()}
    counter = [0]
    rhs = _augmented_rhs(f, theta, z.shape, g_shapes, counter, sign)
    t = t_end
    stops = [t_obs for t_obs, _ in obs] + [t0]
    cots = [c for _, c in obs] + [None]
    n_acc = n_rej = 0
    for t_stop, cot in zip(stops, cots):
        if t_stop < t:
            if config.method == "euler":
                z, a, g = _reverse_euler(f, theta, z, a, g, t, t_stop, config.n_steps, sign)
                n_acc += config.n_steps
            else:
                s0 = AugmentedState(z, a, g).flatten()
                try:
                    sol = dopri5_solve(rhs, s0, t, t_stop, config, phase="backward")
                except SolverError as exc:
                    raise SolverError(str(exc).split("] ", 1)[-1], phase="backward",
                                      t=exc.t, step=exc.step) from exc
                st = AugmentedState.unflatten(sol.states[-1], z.shape, g_shapes)
                z, a, g = st.z.copy(), st.a.copy(), {k: v.copy() for k, v in st.g.items()}
                n_acc += sol.stats["n_accepted"]
                n_rej += sol.stats["n_rejected"]
            t = t_stop
        if cot is not None:
            a = a + cot
    if stats is not None:
        stats.update(n_accepted=n_acc, n_rejected=n_rej, n_fevals=counter[0])
    return GradResult(theta=g, z0=a)


def adjoint_backward(f: ParamDynamicsFn, z_t1, a_t1, t1: float, t0: float,
                     theta: Mapping[str, np.ndarray], config: SolverConfig = SolverConfig(),
                     **kw) -> GradResult:
    """dL/dtheta and dL/dz(t0) for a loss seeded by ``a_t1 = dL/dz(t1)``."""
    a_t1 = np.asarray(a_t1, dtype=np.float64)
    if a_t1.shape != np.shape(z_t1):
        raise ShapeError("adjoint_backward", a_t1.shape, np.shape(z_t1))
    return adjoint_sweep(f, z_t1, t1, theta, [(t1, a_t1)], t0, config, **kw)


def bptt_gradients(f: ParamDynamicsFn, z0, t0: float, t1: float, n_steps: int, loss_cotangent,
                   theta: Mapping[str, np.ndarray], max_steps: int = 100_000) -> GradResult:
    """Reference gradients: backprop through an unrolled forward Euler loop."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if n_steps > max_steps:
        raise MemoryError(f"bptt tape cap: n_steps={n_steps} exceeds max_steps={max_steps}")
    tape = ad.Tape()
    z = tape.leaf(z0, name=_Z)
    tv = {k: tape.leaf(v, name=k) for k, v in theta.items()}
    dt = (t1 - t0) / n_steps
    for k in range(n_steps):
        z = ad.add(z, ad.scale(f(t0 + k * dt, z, tv), dt))
    grads = tape.gradients({z: np.asarray(loss_cotangent, dtype=np.float64)})
    z0_grad = grads.pop(_Z)
    return GradResult(theta=grads, z0=z0_grad)
