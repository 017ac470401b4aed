"""Self-check of the gradient machinery against independent references."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ad
from .adjoint import adjoint_backward, bptt_gradients, loss_output_cotangent
from .data import synthetic_panel
from .model import ModelConfig, PovertyModel, batch_loss, loss_and_grad
from .nn import MlpArch, ParamLayout, init_params, mlp_forward
from .odeint import SolverConfig, dopri5_solve, euler_solve

THRESHOLD = 1e-3
TIGHT = SolverConfig(rtol=1e-8, atol=1e-10)

SHRUNKEN = ModelConfig(n_districts=2, embed_dim=4, latent_dim=3, encoder_hidden=8,
                       dynamics_hidden=(8, 8), decoder_hidden=(8, 8))


@dataclass
class CheckResult:
    name: str
    error: float
    threshold: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.error < self.threshold

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status}  {self.name:<34} max_rel_err={self.error:.3e}  threshold={self.threshold:g}{extra}"


def rel_err(a, b, floor: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))))


def normwise_err(a, b) -> float:
    """max|a - b| / max(max|a|, max|b|): relative error of a whole gradient group."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - b)) / scale)


def random_mlp_dynamics(seed: int, dim: int = 3, hidden: int = 8):
    """(f, theta, z0) for dz/dt = MLP(z) with one tanh hidden layer."""
    arch = MlpArch((dim, hidden, dim), ("tanh", "none"))
    layout = ParamLayout(arch.entries("f"))
    rng = np.random.default_rng(seed)
    flat = init_params(layout, seed)
    flat += 0.1 * rng.standard_normal(flat.size)  # nonzero biases
    theta = {k: v.copy() for k, v in layout.views(flat).items()}

    def f(t, z, th):
        return mlp_forward(arch.bind(th, "f"), z)

    z0 = rng.uniform(-1.0, 1.0, size=dim)
    return f, theta, z0


def check_scalar_closed_form(sign: float = 1.0, solver: SolverConfig = SolverConfig()) -> CheckResult:
    theta = {"theta": np.array([0.5])}

    def f(t, z, th):
        return ad.mul(z, th["theta"])

    z1 = dopri5_solve(lambda t, z: 0.5 * z, np.array([1.0]), 0.0, 1.0, solver).states[-1]
    res = adjoint_backward(f, z1, np.array([1.0]), 1.0, 0.0, theta, solver, sign=sign)
    expected = math.exp(0.5)
    got = float(res.theta["theta"][0])
    return CheckResult("scalar dz/dt=theta*z, dL/dtheta", abs(got - expected) / expected,
                       1e-4, f"expected={expected:.6f} got={got:.6f}")


def check_adjoint_vs_fd(seed: int = 0, sign: float = 1.0, eps: float = 1e-5,
                        solver: SolverConfig = TIGHT) -> CheckResult:
    f, theta, z0 = random_mlp_dynamics(seed)
    target = np.random.default_rng(seed + 1).uniform(-1, 1, size=z0.shape)

    def loss(th, z_init):
        z1 = dopri5_solve(lambda t, z: f(t, z, th), z_init, 0.0, 1.0, solver).states[-1]
        return float(np.sum((z1 - target) ** 2) / z1.size), z1

    _, z1 = loss(theta, z0)
    res = adjoint_backward(f, z1, loss_output_cotangent(z1, target, z1.size), 1.0, 0.0,
                           theta, solver, sign=sign)
    worst = 0.0
    for name, val in list(theta.items()) + [("__z0__", z0)]:
        analytic = res.z0 if name == "__z0__" else res.theta[name]
        numeric = np.empty(val.size)
        for i in range(val.size):
            def shifted(delta):
                th = {k: v.copy() for k, v in theta.items()}
                z_init = z0.copy()
                target_arr = z_init if name == "__z0__" else th[name]
                target_arr.reshape(-1)[i] += delta
                return loss(th, z_init)[0]

            numeric[i] = (shifted(eps) - shifted(-eps)) / (2 * eps)
        worst = max(worst, normwise_err(analytic, numeric))
    return CheckResult("adjoint vs central differences", worst, THRESHOLD)


def check_adjoint_vs_bptt(seed: int = 0, sign: float = 1.0, n_steps: int = 200) -> CheckResult:
    f, theta, z0 = random_mlp_dynamics(seed)
    z1 = euler_solve(lambda t, z: f(t, z, theta), z0, 0.0, 1.0, n_steps).states[-1]
    cot = np.random.default_rng(seed + 2).standard_normal(z0.shape)
    euler = SolverConfig(method="euler", n_steps=n_steps)
    adj = adjoint_backward(f, z1, cot, 1.0, 0.0, theta, euler, sign=sign)
    ref = bptt_gradients(f, z0, 0.0, 1.0, n_steps, cot, theta)
    worst = rel_err(adj.z0, ref.z0, floor=1e-12)
    for k in theta:
        worst = max(worst, rel_err(adj.theta[k], ref.theta[k], floor=1e-12))
    return CheckResult("adjoint(euler) vs BPTT", worst, 1e-6)


def model_group_errors(seed: int = 0, sign: float = 1.0, eps: float = 1e-5,
                       max_coords: int | None = None,
                       solver: SolverConfig = TIGHT) -> dict[str, float]:
    """Normwise relative gradient error per parameter group of the shrunken model."""
    panel = synthetic_panel(SHRUNKEN.n_districts, seed=seed + 7)
    model = PovertyModel.create(SHRUNKEN, seed=seed, district_names=panel.district_names)
    _, grads, _ = loss_and_grad(model, panel, solver, adjoint_sign=sign)
    flat_grad = model.layout.flatten(grads)
    rng = np.random.default_rng(seed)
    analytic: dict[str, list[float]] = {}
    numeric: dict[str, list[float]] = {}
    for entry in model.layout:
        group = entry.name.split(".")[0]
        coords = np.arange(entry.offset, entry.offset + entry.size)
        if max_coords is not None and coords.size > max_coords:
            coords = np.sort(rng.choice(coords, size=max_coords, replace=False))
        for i in coords:
            p = model.params.copy()
            p[i] += eps
            lp = batch_loss(model.with_params(p), panel, solver)[0]
            p[i] -= 2 * eps
            lm = batch_loss(model.with_params(p), panel, solver)[0]
            analytic.setdefault(group, []).append(flat_grad[i])
            numeric.setdefault(group, []).append((lp - lm) / (2 * eps))
    return {g: normwise_err(analytic[g], numeric[g]) for g in analytic}


def check_model(seed: int = 0, sign: float = 1.0, max_coords: int | None = 12) -> CheckResult:
    groups = model_group_errors(seed, sign, max_coords=max_coords)
    detail = " ".join(f"{k}={v:.1e}" for k, v in groups.items())
    return CheckResult("end-to-end model vs central diff.", max(groups.values()), THRESHOLD, detail)


def run_suite(seed: int = 0, sabotage: bool = False, max_coords: int | None = 12) -> list[CheckResult]:
    sign = -1.0 if sabotage else 1.0
    return [
        check_scalar_closed_form(sign),
        check_adjoint_vs_fd(seed, sign),
        check_adjoint_vs_bptt(seed, sign),
        check_model(seed, sign, max_coords),
    ]
