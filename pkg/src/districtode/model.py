"""District-embedded latent ODE: GRU encoder -> latent ODE -> sigmoid decoder.

All districts of a panel are processed as one batch: the latent state is a
``(districts, latent_dim)`` matrix integrated as a single ODE system.
Encoder, decoder and embedding gradients come from ordinary tape backprop;
gradients of the dynamics network (and of the embedding rows it reads) come
from the adjoint sweep.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import ad
from .adjoint import adjoint_sweep
from .data import IndicatorPanel, TimeScale
from .nn import (GruParams, MlpArch, ParamLayout, gru_encode, init_params, load_checkpoint,
                 mlp_forward, save_checkpoint)
from .odeint import SolverConfig, solve_at

_CTX = "__context__"  # embedding rows seen by the dynamics, treated as ODE parameters


@dataclass(frozen=True)
class ModelConfig:
    n_districts: int = 30
    n_indicators: int = 6
    embed_dim: int = 16
    latent_dim: int = 8
    encoder_hidden: int = 64
    dynamics_hidden: tuple[int, ...] = (64, 64)
    decoder_hidden: tuple[int, ...] = (64, 64)
    readout_bias: bool = True
    reverse_encoder: bool = False
    time_input: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dynamics_hidden", tuple(self.dynamics_hidden))
        object.__setattr__(self, "decoder_hidden", tuple(self.decoder_hidden))
        dims = (self.n_districts, self.n_indicators, self.embed_dim, self.latent_dim,
                self.encoder_hidden, *self.dynamics_hidden, *self.decoder_hidden)
        if any(int(d) <= 0 for d in dims):
            raise ValueError("all model dimensions must be positive")

    @property
    def dynamics_arch(self) -> MlpArch:
        n_in = self.latent_dim + self.embed_dim + (1 if self.time_input else 0)
        sizes = (n_in, *self.dynamics_hidden, self.latent_dim)
        return MlpArch(sizes, ("tanh",) * len(self.dynamics_hidden) + ("none",))

    @property
    def decoder_arch(self) -> MlpArch:
        sizes = (self.latent_dim + self.embed_dim, *self.decoder_hidden, self.n_indicators)
        return MlpArch(sizes, ("relu",) * len(self.decoder_hidden) + ("sigmoid",))

    def layout(self) -> ParamLayout:
        entries = [("embedding", (self.n_districts, self.embed_dim), "embedding")]
        entries += GruParams.entries("enc", self.n_indicators + self.embed_dim, self.encoder_hidden)
        entries.append(("enc.readout.W", (self.encoder_hidden, self.latent_dim), "weight"))
        if self.readout_bias:
            entries.append(("enc.readout.b", (self.latent_dim,), "bias"))
        entries += self.dynamics_arch.entries("dyn")
        entries += self.decoder_arch.entries("dec")
        return ParamLayout(entries)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dynamics_hidden"] = list(self.dynamics_hidden)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**d)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form size of the flat parameter vector."""

    def mlp(sizes):
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    n_in, h, lat = cfg.n_indicators + cfg.embed_dim, cfg.encoder_hidden, cfg.latent_dim
    gru = 3 * (n_in * h + h * h + h)
    readout = h * lat + (lat if cfg.readout_bias else 0)
    return (cfg.n_districts * cfg.embed_dim + gru + readout
            + mlp(cfg.dynamics_arch.sizes) + mlp(cfg.decoder_arch.sizes))


@dataclass(frozen=True, eq=False)
class PovertyModel:
    config: ModelConfig
    params: np.ndarray
    district_names: tuple[str, ...] = ()
    time_scale: TimeScale = field(default_factory=TimeScale)

    def __post_init__(self):
        layout = self.config.layout()
        params = np.asarray(self.params, dtype=np.float64)
        if params.shape != (layout.size,):
            raise ValueError(f"parameter vector has shape {params.shape}, expected ({layout.size},)")
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "layout", layout)
        names = tuple(self.district_names) or tuple(
            f"district_{i:03d}" for i in range(self.config.n_districts))
        if len(names) != self.config.n_districts:
            raise ValueError("district_names length must equal n_districts")
        object.__setattr__(self, "district_names", names)

    @classmethod
    def create(cls, config: ModelConfig = ModelConfig(), seed: int = 0, **kw) -> "PovertyModel":
        return cls(config, init_params(config.layout(), seed), **kw)

    def views(self) -> dict[str, np.ndarray]:
        return self.layout.views(self.params)

    def with_params(self, params: np.ndarray) -> "PovertyModel":
        return replace(self, params=params)

    def district_index(self, names: Sequence[str]) -> np.ndarray:
        lookup = {n: i for i, n in enumerate(self.district_names)}
        missing = [n for n in names if n not in lookup]
        if missing:
            raise KeyError(f"districts not in model: {', '.join(missing)}")
        return np.array([lookup[n] for n in names], dtype=np.int64)


# ---------------------------------------------------------------------------
# network pieces; ``p`` maps parameter names to arrays or tape Vars


def _encode(cfg: ModelConfig, p, seq: Sequence[np.ndarray], e):
    if len(seq) == 0:
        raise ValueError("encode: empty series")
    if cfg.reverse_encoder:
        seq = seq[::-1]
    gru = GruParams.bind(p, "enc")
    h0 = np.zeros((e.shape[0], cfg.encoder_hidden))
    h = gru_encode(gru, [ad.concat([x, e]) for x in seq], h0)
    z0 = ad.matmul(h, p["enc.readout.W"])
    if cfg.readout_bias:
        z0 = ad.add(z0, p["enc.readout.b"])
    return z0


def _dynamics(cfg: ModelConfig, p, z, e, t: float):
    parts = [z, e]
    if cfg.time_input:
        parts.append(np.full((z.shape[0], 1), float(t)))
    return mlp_forward(cfg.dynamics_arch.bind(p, "dyn"), ad.concat(parts))


def _decode(cfg: ModelConfig, p, z, e):
    return mlp_forward(cfg.decoder_arch.bind(p, "dec"), ad.concat([z, e]))


def _as_batch(model: PovertyModel, d, series, mask=None):
    idx = np.atleast_1d(np.asarray(d, dtype=np.int64))
    if idx.size and (idx.min() < 0 or idx.max() >= model.config.n_districts):
        raise IndexError(f"district index out of range [0, {model.config.n_districts})")
    x = np.asarray(series, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool).reshape(x.shape), x.shape)
    if x.shape[0] != idx.size or x.shape[2] != model.config.n_indicators:
        raise ad.ShapeError("series", x.shape, (idx.size, -1, model.config.n_indicators))
    return idx, np.where(mask, x, 0.0), mask


def _seq(x: np.ndarray) -> list[np.ndarray]:
    return [x[:, j, :] for j in range(x.shape[1])]


def _squeeze(scalar_d, arr):
    return arr[0] if np.ndim(scalar_d) == 0 else arr


def encode(model: PovertyModel, series, d, mask=None) -> np.ndarray:
    """Initial latent state(s) from observed series ``(T, n_ind)`` or ``(B, T, n_ind)``."""
    idx, x, _ = _as_batch(model, d, series, mask)
    if x.shape[1] == 0:
        raise ValueError("encode: empty series")
    p = model.views()
    z0 = _encode(model.config, p, _seq(x), p["embedding"][idx])
    return _squeeze(d, z0)


def dynamics(model: PovertyModel, z, d, t: float = 0.0) -> np.ndarray:
    idx = np.atleast_1d(np.asarray(d, dtype=np.int64))
    p = model.views()
    z2 = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return _squeeze(d, _dynamics(model.config, p, z2, p["embedding"][idx], t))


def decode(model: PovertyModel, z, d) -> np.ndarray:
    idx = np.atleast_1d(np.asarray(d, dtype=np.int64))
    p = model.views()
    z2 = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return _squeeze(d, _decode(model.config, p, z2, p["embedding"][idx]))


def _latent_fn(model: PovertyModel, p, e):
    cfg = model.config
    return lambda t, z: _dynamics(cfg, p, z, e, t)


def trajectory_from_z0(model: PovertyModel, d, z0, query_times: Sequence[float],
                       solver: SolverConfig = SolverConfig()) -> np.ndarray:
    """Decoded states ``(B, Q, n_ind)`` (or ``(Q, n_ind)`` for scalar ``d``)."""
    idx = np.atleast_1d(np.asarray(d, dtype=np.int64))
    p = model.views()
    e = p["embedding"][idx]
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    sol = solve_at(_latent_fn(model, p, e), z0, 0.0, query_times, solver)
    out = np.stack([_decode(model.config, p, z, e) for z in sol.states], axis=1)
    return _squeeze(d, out)


def trajectory(model: PovertyModel, d, series, query_times: Sequence[float], mask=None,
               solver: SolverConfig = SolverConfig()) -> np.ndarray:
    """encode -> solve from t=0 to each query time -> decode."""
    idx, x, m = _as_batch(model, d, series, mask)
    z0 = encode(model, x, idx, m)
    out = trajectory_from_z0(model, idx, z0, query_times, solver)
    return _squeeze(d, out)


def _panel_batch(model: PovertyModel, panel: IndicatorPanel):
    if panel.shape[2] != model.config.n_indicators:
        raise ad.ShapeError("panel", panel.shape, (-1, -1, model.config.n_indicators))
    idx = model.district_index(panel.district_names)
    times = [t for t in panel.times(model.time_scale)]
    if times and times[0] < 0:
        raise ValueError("panel years precede the model time origin")
    return idx, times


def predict_panel(model: PovertyModel, panel: IndicatorPanel,
                  solver: SolverConfig = SolverConfig(), extra_times: Sequence[float] = ()):
    """Reconstructions at the panel's times plus any extra (normalized) times.

    Returns ``(times, preds)`` with ``preds`` shaped ``(districts, len(times), n_ind)``;
    all times share one integration so observed-time values do not depend
    on which extra times are requested beyond the last observation.
    """
    idx, obs_times = _panel_batch(model, panel)
    times = sorted(set(obs_times) | {float(t) for t in extra_times})
    out = trajectory(model, idx, panel.values, times, panel.mask, solver)
    return times, out


def _masked_loss(preds: np.ndarray, panel: IndicatorPanel):
    n = panel.n_observed
    if n == 0:
        raise ValueError("panel has no observed entries")
    resid = np.where(panel.mask, preds - panel.values, 0.0)
    return float(np.sum(resid * resid) / n), resid


def batch_loss(model: PovertyModel, panel: IndicatorPanel,
               solver: SolverConfig = SolverConfig()) -> tuple[float, np.ndarray]:
    """Masked MSE over observed cells and the residual tensor (0 where masked)."""
    _, preds = predict_panel(model, panel, solver)
    return _masked_loss(preds, panel)


def loss_and_grad(model: PovertyModel, panel: IndicatorPanel,
                  solver: SolverConfig = SolverConfig(), *, adjoint_sign: float = 1.0):
    """Loss, gradient map over every named parameter, and predictions."""
    cfg = model.config
    idx, times = _panel_batch(model, panel)
    n = panel.n_observed
    if n == 0:
        raise ValueError("panel has no observed entries")
    views = model.views()
    x = np.where(panel.mask, panel.values, 0.0)

    # encoder tape
    enc_tape = ad.Tape()
    enc_p = {k: enc_tape.leaf(v, name=k) for k, v in views.items()
             if k == "embedding" or k.startswith("enc.")}
    e_var = ad.take_rows(enc_p["embedding"], idx)
    z0_var = _encode(cfg, enc_p, _seq(x), e_var)
    e_val = e_var.value

    # forward latent solve, untaped
    sol = solve_at(_latent_fn(model, views, e_val), z0_var.value, 0.0, times, solver)

    # decoder + loss tape
    dec_tape = ad.Tape()
    dec_p = {k: dec_tape.leaf(v, name=k) for k, v in views.items()
             if k == "embedding" or k.startswith("dec.")}
    e_dec = ad.take_rows(dec_p["embedding"], idx)
    z_vars = [dec_tape.leaf(z) for z in sol.states]
    loss_var = None
    preds = []
    for j, zv in enumerate(z_vars):
        pred = _decode(cfg, dec_p, zv, e_dec)
        preds.append(pred.value)
        sq = ad.mul(ad.square(ad.sub(pred, x[:, j, :])), panel.mask[:, j, :].astype(np.float64))
        term = ad.scale(ad.reduce_sum(sq), 1.0 / n)
        loss_var = term if loss_var is None else ad.add(loss_var, term)
    dec_grads = dec_tape.backward({loss_var: np.asarray(1.0)})
    grads = {k: dec_grads[v.idx] for k, v in dec_p.items()}
    observations = [(t, np.zeros_like(zv.value) if dec_grads[zv.idx] is None else dec_grads[zv.idx])
                    for t, zv in zip(times, z_vars)]

    # adjoint sweep for the dynamics network and the embedding rows it reads
    theta = {k: v for k, v in views.items() if k.startswith("dyn.")}
    theta[_CTX] = e_val
    res = adjoint_sweep(lambda t, z, th: _dynamics(cfg, th, z, th[_CTX], t),
                        sol.states[-1], times[-1], theta, observations, 0.0, solver,
                        sign=adjoint_sign)
    ctx_grad = res.theta.pop(_CTX)

    enc_grads = enc_tape.backward({z0_var: res.z0, e_var: ctx_grad})
    for k, v in enc_p.items():
        g = enc_grads[v.idx]
        if g is None:
            continue
        grads[k] = g if grads.get(k) is None else grads[k] + g
    grads.update(res.theta)
    full = {k: (np.zeros_like(v) if grads.get(k) is None else grads[k]) for k, v in views.items()}
    loss = float(loss_var.value)
    return loss, full, np.stack(preds, axis=1)


# ---------------------------------------------------------------------------
# persistence: tensor checkpoint plus a JSON sidecar with config and names


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_model(model: PovertyModel, path, extra: Mapping | None = None) -> None:
    save_checkpoint(path, model.views())
    meta = {
        "model_config": model.config.to_dict(),
        "district_names": list(model.district_names),
        "time_scale": {"year0": model.time_scale.year0, "year1": model.time_scale.year1},
    }
    if extra:
        meta.update(extra)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_model(path) -> tuple[PovertyModel, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    side = sidecar_path(path)
    if not side.exists():
        raise FileNotFoundError(f"no such file: {side}")
    meta = json.loads(side.read_text(encoding="utf-8"))
    cfg = ModelConfig.from_dict(meta["model_config"])
    tensors, _ = load_checkpoint(path)
    layout = cfg.layout()
    missing = [e.name for e in layout if e.name not in tensors]
    if missing:
        raise ValueError(f"{path}: checkpoint lacks tensors {', '.join(missing)}")
    flat = layout.flatten(tensors)
    model = PovertyModel(cfg, flat, tuple(meta["district_names"]), TimeScale(**meta["time_scale"]))
    return model, meta
