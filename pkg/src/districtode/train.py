"""Adam with L2 weight decay, cosine annealing, and the full-batch epoch loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .data import IndicatorPanel
from .model import PovertyModel, loss_and_grad
from .nn import ParamLayout
from .odeint import SolverConfig

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss!r})")


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 1e-5
    epochs: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    decoupled_weight_decay: bool = False
    max_loss: float = 1e3

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]

    def append(self, epoch: int, loss: float, lr: float, wall_ms: float) -> None:
        expected = self.records[-1]["epoch"] + 1 if self.records else 1
        if epoch != expected:
            raise ValueError(f"epochs must be contiguous from 1: expected {expected}, got {epoch}")
        self.records.append({"epoch": epoch, "loss": loss, "lr": lr, "wall_ms": wall_ms})

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "lr", "wall_ms"])
            for r in self.records:
                w.writerow([r["epoch"], repr(r["loss"]), repr(r["lr"]), f"{r['wall_ms']:.3f}"])


def cosine_lr(cfg: TrainConfig, epoch: float) -> float:
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float,
              weight_decay: float = 0.0, *, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, decoupled: bool = False,
              layout: ParamLayout | None = None) -> np.ndarray:
    """One Adam update; mutates ``state`` and returns new parameters."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}")
    if not np.all(np.isfinite(grads)):
        where = "gradient"
        if layout is not None:
            bad = [e.name for e in layout
                   if not np.all(np.isfinite(grads[e.offset:e.offset + e.size]))]
            where = f"gradient of {', '.join(bad)}"
        raise FloatingPointError(f"non-finite {where}")
    g = grads if decoupled else grads + weight_decay * params
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * g
    state.v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    if decoupled:
        new = new - lr * weight_decay * params
    return new


def fit(model: PovertyModel, panel: IndicatorPanel, train_cfg: TrainConfig = TrainConfig(),
        solver_cfg: SolverConfig = SolverConfig(),
        callback: Callable[[int, float], None] | None = None) -> tuple[PovertyModel, TrainLog]:
    """Full-batch training; returns the trained model and per-epoch log.

    The logged loss of epoch ``e`` is measured before that epoch's update,
    which uses learning rate ``cosine_lr(e - 1)``.
    """
    layout = model.layout
    params = model.params.copy()
    state = AdamState.zeros(params.size)
    tlog = TrainLog()
    for epoch in range(1, train_cfg.epochs + 1):
        t_start = time.perf_counter()
        loss, grads, _ = loss_and_grad(model.with_params(params), panel, solver_cfg)
        if not math.isfinite(loss) or loss > train_cfg.max_loss:
            raise DivergenceError(epoch, loss)
        lr = cosine_lr(train_cfg, epoch - 1)
        params = adam_step(state, params, layout.flatten(grads), lr, train_cfg.weight_decay,
                           beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.eps,
                           decoupled=train_cfg.decoupled_weight_decay, layout=layout)
        tlog.append(epoch, loss, lr, 1e3 * (time.perf_counter() - t_start))
        if callback is not None:
            callback(epoch, loss)
        if epoch % 100 == 0:
            log.info("epoch %d loss %.6g lr %.3g", epoch, loss, lr)
    return model.with_params(params), tlog


def moving_average(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([])
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window
