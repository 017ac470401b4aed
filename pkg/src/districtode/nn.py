"""MLP, GRU and embedding layers over :mod:`districtode.ad`, plus the flat
parameter vector they read from and its on-disk checkpoint format.

Weights are stored input-major, ``(fan_in, fan_out)``, and applied to
row-batched activations as ``x @ W + b``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import ad
from .ad import ShapeError

ACTIVATIONS = ("tanh", "relu", "sigmoid", "none")

GRU_FIELDS = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


# ---------------------------------------------------------------------------
# parameter layout


@dataclass(frozen=True)
class ParamEntry:
    name: str
    shape: tuple[int, ...]
    kind: str  # "weight" | "bias" | "embedding"
    offset: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)


class ParamLayout:
    """Ordered named views into one flat float64 vector."""

    def __init__(self, entries: Iterable[tuple[str, Sequence[int], str]]):
        self.entries: dict[str, ParamEntry] = {}
        offset = 0
        for name, shape, kind in entries:
            shape = tuple(int(s) for s in shape)
            if any(s <= 0 for s in shape):
                raise ValueError(f"parameter {name!r} has non-positive extent {shape}")
            if name in self.entries:
                raise ValueError(f"duplicate parameter name {name!r}")
            entry = ParamEntry(name, shape, kind, offset)
            self.entries[name] = entry
            offset += entry.size
        self.size = offset

    def __iter__(self):
        return iter(self.entries.values())

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.entries if n.startswith(prefix)]

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        if flat.shape != (self.size,):
            raise ShapeError("param views", flat.shape, (self.size,))
        return {
            e.name: flat[e.offset : e.offset + e.size].reshape(e.shape) for e in self
        }

    def flatten(self, grads: Mapping[str, np.ndarray]) -> np.ndarray:
        """GradientMap -> flat vector; absent names are zero."""
        out = np.zeros(self.size)
        for name, g in grads.items():
            e = self.entries[name]
            g = np.asarray(g, dtype=np.float64)
            if g.shape != e.shape:
                raise ShapeError(f"gradient {name}", g.shape, e.shape)
            out[e.offset : e.offset + e.size] = g.reshape(-1)
        return out


def init_params(layout: ParamLayout, seed: int) -> np.ndarray:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0, embeddings ~ N(0, 0.1)."""
    rng = np.random.default_rng(seed)
    flat = np.zeros(layout.size)
    for e in layout:
        part = flat[e.offset : e.offset + e.size]
        if e.kind == "weight":
            bound = 1.0 / math.sqrt(e.shape[0])
            part[:] = rng.uniform(-bound, bound, size=e.size)
        elif e.kind == "embedding":
            part[:] = rng.normal(0.0, 0.1, size=e.size)
    return flat


# ---------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class MlpArch:
    """Architecture of an MLP: layer widths and one activation per layer."""

    sizes: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        if len(self.sizes) < 2 or len(self.activations) != len(self.sizes) - 1:
            raise ValueError("need len(activations) == len(sizes) - 1 >= 1")
        bad = set(self.activations) - set(ACTIVATIONS)
        if bad:
            raise ValueError(f"unknown activation(s) {sorted(bad)}")

    def entries(self, prefix: str) -> list[tuple[str, tuple[int, ...], str]]:
        out = []
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            out.append((f"{prefix}.{i}.W", (a, b), "weight"))
            out.append((f"{prefix}.{i}.b", (b,), "bias"))
        return out

    def bind(self, params: Mapping[str, Any], prefix: str) -> "MlpParams":
        n = len(self.activations)
        return MlpParams(
            weights=tuple(params[f"{prefix}.{i}.W"] for i in range(n)),
            biases=tuple(params[f"{prefix}.{i}.b"] for i in range(n)),
            activations=self.activations,
        )


@dataclass(frozen=True)
class MlpParams:
    weights: tuple
    biases: tuple
    activations: tuple[str, ...]


_ACT = {"tanh": ad.tanh, "relu": ad.relu, "sigmoid": ad.sigmoid, "none": lambda x: x}


def mlp_forward(params: MlpParams, x):
    h = x
    for W, b, act in zip(params.weights, params.biases, params.activations):
        w_shape = W.shape
        if h.shape[-1] != w_shape[0]:
            raise ShapeError("mlp_forward", tuple(h.shape), tuple(w_shape))
        h = _ACT[act](ad.add(ad.matmul(h, W), b))
    return h


@dataclass(frozen=True)
class GruParams:
    W_z: Any
    U_z: Any
    b_z: Any
    W_r: Any
    U_r: Any
    b_r: Any
    W_h: Any
    U_h: Any
    b_h: Any

    @staticmethod
    def entries(prefix: str, input_dim: int, hidden: int):
        shapes = {"W": (input_dim, hidden), "U": (hidden, hidden), "b": (hidden,)}
        return [
            (f"{prefix}.{f}", shapes[f[0]], "bias" if f[0] == "b" else "weight")
            for f in GRU_FIELDS
        ]

    @classmethod
    def bind(cls, params: Mapping[str, Any], prefix: str) -> "GruParams":
        return cls(**{f: params[f"{prefix}.{f}"] for f in GRU_FIELDS})

    @property
    def dims(self) -> tuple[int, int]:
        return self.W_z.shape[0], self.W_z.shape[1]


def gru_step(p: GruParams, x_t, h_prev):
    """One GRU update: update gate z, reset gate r, candidate, interpolation."""
    n_in, n_h = p.dims
    if x_t.shape[-1] != n_in or h_prev.shape[-1] != n_h:
        raise ShapeError("gru_step", tuple(x_t.shape), tuple(h_prev.shape), (n_in, n_h))
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(x_t, p.W_z), ad.matmul(h_prev, p.U_z)), p.b_z))
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(x_t, p.W_r), ad.matmul(h_prev, p.U_r)), p.b_r))
    cand = ad.tanh(
        ad.add(ad.add(ad.matmul(x_t, p.W_h), ad.matmul(ad.mul(r, h_prev), p.U_h)), p.b_h)
    )
    # (1 - z) * h + z * cand, written without a scalar broadcast
    return ad.add(h_prev, ad.mul(z, ad.sub(cand, h_prev)))


def gru_encode(p: GruParams, sequence: Sequence, h0):
    if len(sequence) == 0:
        raise ValueError("gru_encode: empty sequence")
    h = h0
    for x_t in sequence:
        h = gru_step(p, x_t, h)
    return h


def embed_lookup(table, d):
    """Row(s) ``d`` of the embedding table; gradients land only in those rows."""
    return ad.take_rows(table, d)


# ---------------------------------------------------------------------------
# checkpoint: one JSON header line, then little-endian float64 payload

_MAGIC = "districtode-checkpoint/1"


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    header: dict[str, Any] = {"format": _MAGIC, "tensors": []}
    if meta:
        header["meta"] = dict(meta)
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.array(arr, dtype="<f8", order="C")
        header["tensors"].append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    payload = raw[nl + 1 :]
    tensors = {}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        n = math.prod(shape) * 8
        start = t["offset"]
        if start + n > len(payload):
            raise ValueError(f"{path}: truncated tensor {t['name']!r}")
        tensors[t["name"]] = np.frombuffer(payload[start : start + n], dtype="<f8").reshape(shape).astype(np.float64)
    return tensors, header.get("meta", {})
