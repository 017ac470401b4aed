"""Dense float64 arithmetic with a reverse-mode tape.

Values are plain numpy arrays. A computation becomes differentiable when at
least one argument is a :class:`Var`, i.e. a handle to a node on a
:class:`Tape`; with only arrays the same functions evaluate eagerly and
record nothing, so layer code can be shared between the taped and the
untaped (solver) paths.

The primitive set is closed: matmul, add, sub, mul, scale, tanh, sigmoid,
relu, square, concat, slice_, take_rows, reduce_sum. ``add`` and ``sub``
broadcast only a vector against the rows of a matrix (bias add).
"""

from __future__ import annotations

from typing import Any, Callable, Mapping, Sequence, Union

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Var",
    "Tape",
    "GradientMap",
    "forward",
    "vjp",
    "grad_check",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "tanh",
    "sigmoid",
    "relu",
    "square",
    "concat",
    "slice_",
    "take_rows",
    "reduce_sum",
]

GradientMap = dict  # leaf name -> cotangent array (same shape as the leaf)


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, where: str = ""):
        self.op = op
        msg = f"{op}: non-finite value"
        if where:
            msg += f" ({where})"
        super().__init__(msg)


class _Node:
    __slots__ = ("op", "inputs", "value", "saved", "name")

    def __init__(self, op, inputs, value, saved=None, name=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.saved = saved
        self.name = name


class Var:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "idx")
    __array_priority__ = 100  # make ndarray <op> Var dispatch to Var

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(#{self.idx} {self.tape.nodes[self.idx].op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


Value = Union[Var, np.ndarray, float]


class Tape:
    """Append-only record of primitive applications in topological order."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.leaves: dict[Any, int] = {}
        self.output: Var | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, op, inputs, value, saved=None, name=None) -> Var:
        self.nodes.append(_Node(op, inputs, value, saved, name))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, name: Any = None) -> Var:
        arr = _as_array(value)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("leaf", f"input {name!r}")
        var = self._push("leaf", (), arr, name=name)
        if name is not None:
            if name in self.leaves:
                raise KeyError(f"duplicate leaf name {name!r}")
            self.leaves[name] = var.idx
        return var

    def const(self, value) -> Var:
        return self._push("const", (), _as_array(value))

    def backward(self, seeds) -> list:
        """Reverse sweep. ``seeds`` maps Var -> cotangent (or is a list of pairs).

        Returns the per-node cotangent list; entries for unreached nodes are None.
        """
        pairs = seeds.items() if isinstance(seeds, Mapping) else seeds
        grads: list = [None] * len(self.nodes)
        for var, cot in pairs:
            if var.tape is not self:
                raise ValueError("seed variable belongs to another tape")
            cot = _as_array(cot)
            if cot.shape != var.shape:
                raise ShapeError("vjp", var.shape, cot.shape)
            _accumulate(grads, var.idx, cot)
        for idx in range(len(self.nodes) - 1, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            node = self.nodes[idx]
            if not node.inputs:
                continue
            parts = _BACKWARD[node.op](node, g, self.nodes)
            for inp, part in zip(node.inputs, parts):
                if part is not None:
                    _accumulate(grads, inp, part)
        return grads

    def gradients(self, seeds) -> GradientMap:
        """Cotangents of every named leaf; unreached leaves get zeros."""
        grads = self.backward(seeds)
        out: GradientMap = {}
        for name, idx in self.leaves.items():
            g = grads[idx]
            out[name] = np.zeros_like(self.nodes[idx].value) if g is None else g
        return out


def _accumulate(grads: list, idx: int, part: np.ndarray) -> None:
    # fan-out: cotangents from distinct consumers add
    if grads[idx] is None:
        grads[idx] = part
    else:
        grads[idx] = grads[idx] + part


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _tape_of(args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands live on different tapes")
    return tape


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else _as_array(x)


def _ref(tape: Tape, x) -> int:
    return x.idx if isinstance(x, Var) else tape.const(x).idx


def _check_finite(op: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)


def _record(op: str, args: Sequence, value: np.ndarray, saved=None):
    _check_finite(op, value)
    tape = _tape_of(args)
    if tape is None:
        return value
    inputs = tuple(_ref(tape, a) for a in args)
    return tape._push(op, inputs, value, saved)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Value, b: Value):
    av, bv = _val(a), _val(b)
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise ShapeError("matmul", av.shape, bv.shape)
    return _record("matmul", (a, b), av @ bv)


def _check_additive(op: str, av: np.ndarray, bv: np.ndarray) -> None:
    if av.shape == bv.shape:
        return
    if av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0]:
        return
    if bv.ndim == 2 and av.ndim == 1 and bv.shape[1] == av.shape[0]:
        return
    raise ShapeError(op, av.shape, bv.shape)


def add(a: Value, b: Value):
    av, bv = _val(a), _val(b)
    _check_additive("add", av, bv)
    return _record("add", (a, b), av + bv)


def sub(a: Value, b: Value):
    av, bv = _val(a), _val(b)
    _check_additive("sub", av, bv)
    return _record("sub", (a, b), av - bv)


def mul(a: Value, b: Value):
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise ShapeError("mul", av.shape, bv.shape)
    return _record("mul", (a, b), av * bv)


def scale(a: Value, c: float):
    c = float(c)
    return _record("scale", (a,), _val(a) * c, saved=c)


def tanh(a: Value):
    return _record("tanh", (a,), np.tanh(_val(a)))


_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = np.nextafter(1.0, 0.0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # saturating logits would round to exactly 0 or 1; keep the range open
    return np.clip(out, _SIG_LO, _SIG_HI, out=out)


def sigmoid(a: Value):
    return _record("sigmoid", (a,), _sigmoid(_val(a)))


def relu(a: Value):
    return _record("relu", (a,), np.maximum(_val(a), 0.0))


def square(a: Value):
    av = _val(a)
    return _record("square", (a,), av * av)


def concat(xs: Sequence[Value], axis: int = -1):
    vals = [_val(x) for x in xs]
    if not vals:
        raise ValueError("concat: empty input list")
    nd = vals[0].ndim
    ax = axis % nd if nd else 0
    for v in vals[1:]:
        if v.ndim != nd or any(
            v.shape[i] != vals[0].shape[i] for i in range(nd) if i != ax
        ):
            raise ShapeError("concat", vals[0].shape, v.shape)
    sizes = [v.shape[ax] for v in vals]
    return _record("concat", tuple(xs), np.concatenate(vals, axis=ax), saved=(ax, sizes))


def slice_(a: Value, start: int, stop: int, axis: int = -1):
    av = _val(a)
    ax = axis % av.ndim
    if not 0 <= start < stop <= av.shape[ax]:
        raise ShapeError("slice", av.shape, (start, stop))
    index = [slice(None)] * av.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    return _record("slice", (a,), av[index].copy(), saved=index)


def take_rows(table: Value, rows):
    """Row gather ``table[rows]``; ``rows`` is an int or an int array."""
    tv = _val(table)
    idx = np.asarray(rows)
    if tv.ndim != 2 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("take_rows", tv.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= tv.shape[0]):
        raise IndexError(f"take_rows: row index out of range [0, {tv.shape[0]})")
    return _record("take_rows", (table,), tv[idx], saved=idx)


def reduce_sum(a: Value):
    return _record("reduce_sum", (a,), np.asarray(_val(a).sum()))


# ---------------------------------------------------------------------------
# backward rules: (node, cotangent, all nodes) -> per-input cotangents


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0)


def _bw_matmul(node, g, nodes):
    a = nodes[node.inputs[0]].value
    b = nodes[node.inputs[1]].value
    if a.ndim == 1 and b.ndim == 1:
        return g * b, g * a
    if a.ndim == 1:
        return b @ g, np.outer(a, g)
    if b.ndim == 1:
        return np.outer(g, b), a.T @ g
    return g @ b.T, a.T @ g


def _bw_add(node, g, nodes):
    sa = nodes[node.inputs[0]].value.shape
    sb = nodes[node.inputs[1]].value.shape
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _bw_sub(node, g, nodes):
    sa = nodes[node.inputs[0]].value.shape
    sb = nodes[node.inputs[1]].value.shape
    return _unbroadcast(g, sa), -_unbroadcast(g, sb)


def _bw_mul(node, g, nodes):
    return g * nodes[node.inputs[1]].value, g * nodes[node.inputs[0]].value


def _bw_tanh(node, g, nodes):
    y = node.value
    return (g * (1.0 - y * y),)


def _bw_sigmoid(node, g, nodes):
    y = node.value
    return (g * y * (1.0 - y),)


def _bw_relu(node, g, nodes):
    return (g * (nodes[node.inputs[0]].value > 0.0),)


def _bw_concat(node, g, nodes):
    ax, sizes = node.saved
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=ax))


def _bw_slice(node, g, nodes):
    out = np.zeros_like(nodes[node.inputs[0]].value)
    out[node.saved] = g
    return (out,)


def _bw_take_rows(node, g, nodes):
    out = np.zeros_like(nodes[node.inputs[0]].value)
    np.add.at(out, node.saved, g)
    return (out,)


def _bw_reduce_sum(node, g, nodes):
    return (np.full_like(nodes[node.inputs[0]].value, float(g)),)


_BACKWARD: dict[str, Callable] = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "scale": lambda node, g, nodes: (g * node.saved,),
    "tanh": _bw_tanh,
    "sigmoid": _bw_sigmoid,
    "relu": _bw_relu,
    "square": lambda node, g, nodes: (2.0 * nodes[node.inputs[0]].value * g,),
    "concat": _bw_concat,
    "slice": _bw_slice,
    "take_rows": _bw_take_rows,
    "reduce_sum": _bw_reduce_sum,
}

PRIMITIVES = tuple(_BACKWARD)


# ---------------------------------------------------------------------------
# functional entry points


def forward(builder: Callable, inputs) -> tuple[np.ndarray, Tape]:
    """Run ``builder`` on fresh leaves and return (output value, tape).

    ``inputs`` is a sequence (leaves named 0, 1, ...; builder called
    positionally) or a mapping (leaves named by key; builder receives the
    mapping of Vars).
    """
    tape = Tape()
    if isinstance(inputs, Mapping):
        leaves = {k: tape.leaf(v, name=k) for k, v in inputs.items()}
        out = builder(leaves)
    else:
        leaves = [tape.leaf(v, name=i) for i, v in enumerate(inputs)]
        out = builder(*leaves)
    if not isinstance(out, Var) or out.tape is not tape:
        out = tape.const(_val(out))
    tape.output = out
    return out.value, tape


def vjp(tape: Tape, cotangent) -> GradientMap:
    """Cotangent^T . d(output)/d(leaf) for every named leaf of ``tape``."""
    if tape.output is None:
        raise ValueError("tape has no recorded output")
    return tape.gradients({tape.output: cotangent})


def _flat_eval(builder, point, k, x, cot):
    pts = [p.copy() for p in point]
    pts[k].reshape(-1)[:] = x
    out, _ = forward(builder, pts)
    return float(np.sum(out * cot))


def grad_check(builder: Callable, point: Sequence, eps: float = 1e-5, seed: int = 0) -> float:
    """Max over coordinates of |vjp - central difference| / max(1, |a|, |b|).

    Vector outputs are contracted with a fixed random cotangent.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    point = [_as_array(p).copy() for p in point]
    out, tape = forward(builder, point)
    rng = np.random.default_rng(seed)
    cot = np.ones_like(out) if out.ndim == 0 else rng.standard_normal(out.shape)
    grads = vjp(tape, cot)
    worst = 0.0
    for k, p in enumerate(point):
        flat = p.reshape(-1)
        analytic = grads[k].reshape(-1)
        for i in range(flat.size):
            xp = flat.copy()
            xm = flat.copy()
            xp[i] += eps
            xm[i] -= eps
            try:
                fp = _flat_eval(builder, point, k, xp, cot)
                fm = _flat_eval(builder, point, k, xm, cot)
            except NonFiniteError as exc:
                raise NonFiniteError(exc.op, f"input {k}, coordinate {i}") from exc
            numeric = (fp - fm) / (2.0 * eps)
            a = float(analytic[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
