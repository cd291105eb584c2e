"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every primitive is a pair of functions: a forward map over numpy values and a
vector-Jacobian product.  Operations applied to :class:`Var` handles are
recorded on their :class:`Tape`; operations applied to plain arrays are
evaluated directly with the same forward code, so numerical routines (the
renderer in particular) can run with or without a tape.

A tape records values eagerly while it is being built.  It can be replayed on
new input values with :func:`forward`, and :func:`forward_backward` returns the
outputs together with the gradient of the final (scalar) output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit


class GradError(RuntimeError):
    """Raised for malformed tapes, shape mismatches and non-finite values."""

    def __init__(self, message: str, node: int | None = None):
        super().__init__(message if node is None else f"node {node}: {message}")
        self.node = node


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    # vjp(g, out, inputs, attrs, needs) -> list of input cotangents (None where not needed)
    vjp: Callable[..., list]


PRIMITIVES: dict[str, Primitive] = {}


def _register(name: str, forward, vjp) -> None:
    PRIMITIVES[name] = Primitive(name, forward, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _softplus(x):
    # log(1 + e^x) without overflow
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    return expit(x)


# -- elementwise --------------------------------------------------------------

_register(
    "add",
    lambda a, b: a + b,
    lambda g, out, ins, at, need: [
        _unbroadcast(g, ins[0].shape) if need[0] else None,
        _unbroadcast(g, ins[1].shape) if need[1] else None,
    ],
)
_register(
    "mul",
    lambda a, b: a * b,
    lambda g, out, ins, at, need: [
        _unbroadcast(g * ins[1], ins[0].shape) if need[0] else None,
        _unbroadcast(g * ins[0], ins[1].shape) if need[1] else None,
    ],
)
_register("neg", lambda a: -a, lambda g, out, ins, at, need: [-g])
_register("exp", np.exp, lambda g, out, ins, at, need: [g * out])
_register("reciprocal", lambda a: 1.0 / a, lambda g, out, ins, at, need: [-g * out * out])
_register("softplus", _softplus, lambda g, out, ins, at, need: [g * _sigmoid(ins[0])])
_register("sigmoid", _sigmoid, lambda g, out, ins, at, need: [g * out * (1.0 - out)])


def _abspow_forward(a, p):
    if p == 1:
        return np.abs(a)
    if p == 2:
        return a * a
    raise GradError(f"abspow supports p in {{1, 2}}, got {p}")


def _abspow_vjp(g, out, ins, at, need):
    a = ins[0]
    if at["p"] == 1:
        return [g * np.sign(a)]  # sign(0) == 0: subgradient choice
    return [2.0 * g * a]


_register("abspow", _abspow_forward, _abspow_vjp)

# sin/cos carry no trainable inputs in the pipeline but are cheap to support.
_register("sin", np.sin, lambda g, out, ins, at, need: [g * np.cos(ins[0])])
_register("cos", np.cos, lambda g, out, ins, at, need: [-g * np.sin(ins[0])])


# -- reductions and structure -------------------------------------------------

def _sum_forward(a, axis=None):
    return np.asarray(np.sum(a, axis=axis))


def _sum_vjp(g, out, ins, at, need):
    a = ins[0]
    axis = at.get("axis")
    if axis is None:
        return [np.broadcast_to(g, a.shape).copy()]
    return [np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()]


_register("sum", _sum_forward, _sum_vjp)


def _cumsum_excl_forward(a, axis):
    # sum_{j<i} a_j; built by shifting so the first entry is an exact zero
    c = np.cumsum(a, axis=axis)
    head = np.zeros_like(np.take(a, [0], axis=axis))
    return np.concatenate([head, np.take(c, range(a.shape[axis] - 1), axis=axis)], axis=axis)


def _cumsum_excl_vjp(g, out, ins, at, need):
    # d/da_k of sum_i g_i sum_{j<i} a_j = sum_{i>k} g_i
    axis = at["axis"]
    rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
    return [rev - g]


_register("cumsum_exclusive", _cumsum_excl_forward, _cumsum_excl_vjp)

def _matmul_vjp(g, out, ins, at, need):
    a, b = ins
    # promote vector operands to matrices so one pair of formulas covers every case
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = np.reshape(g, (a2.shape[0], b2.shape[1]))
    ga = (g2 @ b2.T).reshape(a.shape) if need[0] else None
    gb = (a2.T @ g2).reshape(b.shape) if need[1] else None
    return [ga, gb]


_register("matmul", lambda a, b: a @ b, _matmul_vjp)
_register(
    "reshape",
    lambda a, shape: a.reshape(shape),
    lambda g, out, ins, at, need: [g.reshape(ins[0].shape)],
)


def _concat_vjp(g, out, ins, at, need):
    axis = at["axis"]
    bounds = np.cumsum([0] + [x.shape[axis] for x in ins])
    return [
        np.take(g, range(bounds[k], bounds[k + 1]), axis=axis) if need[k] else None
        for k in range(len(ins))
    ]


_register("concat", lambda *xs, axis: np.concatenate(xs, axis=axis), _concat_vjp)


# -- weighted gather ----------------------------------------------------------

class GatherIndex:
    """Row-gather pattern ``out[m] = sum_k w[m, k] * table[idx[m, k]]``.

    Covers trilinear/bilinear interpolation (K = 8 / 4), im2col for
    convolutions and scatter of sparse rows into dense volumes (K = 1), with
    zero weights marking padding.  The sparse matrix is built once and reused
    by both passes.
    """

    __slots__ = ("idx", "weights", "n_rows", "matrix")

    def __init__(self, idx: np.ndarray, weights: np.ndarray, n_rows: int):
        idx = np.asarray(idx, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.float64)
        if idx.ndim == 1:
            idx, weights = idx[:, None], weights[:, None]
        if idx.shape != weights.shape:
            raise GradError(f"gather index shape {idx.shape} != weight shape {weights.shape}")
        weights = np.where(idx < 0, 0.0, weights)
        idx = np.where(idx < 0, 0, idx)
        if idx.size and (idx.max() >= n_rows):
            raise GradError(f"gather index {idx.max()} out of range for table of {n_rows} rows")
        self.idx, self.weights, self.n_rows = idx, weights, n_rows
        m, k = idx.shape
        rows = np.repeat(np.arange(m), k)
        self.matrix = sp.csr_matrix(
            (weights.ravel(), (rows, idx.ravel())), shape=(m, n_rows)
        )
        self.matrix.sum_duplicates()


def _check_table(table, index):
    if table.ndim != 2 or table.shape[0] != index.n_rows:
        raise GradError(f"gather table has shape {table.shape}, index expects {index.n_rows} rows")


def _gather_forward(table, index: GatherIndex):
    _check_table(table, index)
    return np.asarray(index.matrix @ table)


def _gather_vjp(g, out, ins, at, need):
    return [np.asarray(at["index"].matrix.T @ g)]


def _gather_w_forward(table, weights, index: GatherIndex):
    _check_table(table, index)
    return np.einsum("mk,mkc->mc", weights, table[index.idx])


def _gather_w_vjp(g, out, ins, at, need):
    table, weights = ins
    index: GatherIndex = at["index"]
    gt = gw = None
    if need[0]:
        gt = np.zeros_like(table)
        np.add.at(gt, index.idx.ravel(), (weights[..., None] * g[:, None, :]).reshape(-1, table.shape[1]))
    if need[1]:
        gw = np.einsum("mc,mkc->mk", g, table[index.idx])
    return [gt, gw]


_register("gather", _gather_forward, _gather_vjp)
_register("gather_w", _gather_w_forward, _gather_w_vjp)


# -- tape ---------------------------------------------------------------------

@dataclass
class Node:
    op: str  # primitive name, "input" or "const"
    inputs: tuple[int, ...]
    attrs: dict[str, Any]
    value: np.ndarray
    needs_grad: bool


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Node inputs always reference earlier nodes, so the node list is a
    topological order by construction.
    """

    nodes: list[Node] = field(default_factory=list)
    input_ids: list[int] = field(default_factory=list)
    outputs: list[int] = field(default_factory=list)
    check_finite: bool = False

    def input(self, value, name: str | None = None) -> "Var":
        value = np.array(value, dtype=np.float64)
        self.nodes.append(Node("input", (), {"name": name}, value, True))
        self.input_ids.append(len(self.nodes) - 1)
        return Var(self, len(self.nodes) - 1)

    def const(self, value) -> "Var":
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(Node("const", (), {}, value, False))
        return Var(self, len(self.nodes) - 1)

    def mark_output(self, var: "Var") -> "Var":
        if var.tape is not self:
            raise GradError("output belongs to a different tape")
        self.outputs.append(var.id)
        return var

    def record(self, op: str, inputs: Sequence[int], attrs: dict[str, Any]) -> "Var":
        prim = PRIMITIVES[op]
        vals = [self.nodes[i].value for i in inputs]
        node_id = len(self.nodes)
        try:
            out = np.asarray(prim.forward(*vals, **attrs), dtype=np.float64)
        except (ValueError, IndexError) as exc:
            shapes = ", ".join(str(v.shape) for v in vals)
            raise GradError(f"{op} failed on input shapes ({shapes}): {exc}", node_id) from exc
        if self.check_finite and not np.all(np.isfinite(out)):
            raise GradError(f"non-finite value produced by {op}", node_id)
        needs = any(self.nodes[i].needs_grad for i in inputs)
        self.nodes.append(Node(op, tuple(inputs), attrs, out, needs))
        return Var(self, node_id)

    @property
    def input_shapes(self) -> list[tuple]:
        return [self.nodes[i].value.shape for i in self.input_ids]


class Var:
    """Handle to a tape node.  Supports the arithmetic operators."""

    __slots__ = ("tape", "id")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis=axis)


def _apply(op: str, *args, **attrs):
    tape = next((a.tape for a in args if isinstance(a, Var)), None)
    if tape is None:
        vals = [np.asarray(a, dtype=np.float64) for a in args]
        return np.asarray(PRIMITIVES[op].forward(*vals, **attrs), dtype=np.float64)
    ids = []
    for a in args:
        if isinstance(a, Var):
            if a.tape is not tape:
                raise GradError(f"{op}: operands live on different tapes")
            ids.append(a.id)
        else:
            ids.append(tape.const(a).id)
    return tape.record(op, ids, attrs)


def value(x) -> np.ndarray:
    """The numpy value behind ``x`` (a Var or an array-like)."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def add(a, b):
    return _apply("add", a, b)


def mul(a, b):
    return _apply("mul", a, b)


def neg(a):
    return _apply("neg", a)


def exp(a):
    return _apply("exp", a)


def reciprocal(a):
    return _apply("reciprocal", a)


def softplus(a):
    return _apply("softplus", a)


def sigmoid(a):
    return _apply("sigmoid", a)


def abspow(a, p: int):
    return _apply("abspow", a, p=p)


def sin(a):
    return _apply("sin", a)


def cos(a):
    return _apply("cos", a)


def sum_(a, axis=None):
    return _apply("sum", a, axis=axis)


def cumsum_exclusive(a, axis: int = -1):
    ax = axis % np.ndim(value(a))
    return _apply("cumsum_exclusive", a, axis=ax)


def matmul(a, b):
    return _apply("matmul", a, b)


def reshape(a, shape):
    return _apply("reshape", a, shape=tuple(shape))


def concat(xs: Sequence, axis: int = -1):
    ax = axis % np.ndim(value(xs[0]))
    return _apply("concat", *xs, axis=ax)


def gather(table, index: GatherIndex, weights=None):
    """Weighted row gather.

    With ``weights=None`` the index's own (constant) weights are used; passing
    ``weights`` makes them a differentiable operand.
    """
    if weights is None:
        return _apply("gather", table, index=index)
    return _apply("gather_w", table, weights, index=index)


def mean(a):
    return mul(sum_(a), 1.0 / max(1, value(a).size))


# -- replay and differentiation -----------------------------------------------

def forward(tape: Tape, inputs: Sequence) -> list[np.ndarray]:
    """Replay ``tape`` on new input values and return every node value."""
    if len(inputs) != len(tape.input_ids):
        raise GradError(f"tape declares {len(tape.input_ids)} inputs, got {len(inputs)}")
    vals: list[np.ndarray | None] = [None] * len(tape.nodes)
    for k, nid in enumerate(tape.input_ids):
        x = np.asarray(inputs[k], dtype=np.float64)
        want = tape.nodes[nid].value.shape
        if x.shape != want:
            raise GradError(f"input {k} has shape {x.shape}, tape expects {want}", nid)
        vals[nid] = x
    for nid, node in enumerate(tape.nodes):
        if node.op == "input":
            continue
        if node.op == "const":
            vals[nid] = node.value
            continue
        for i in node.inputs:
            if i >= nid:
                raise GradError(f"input {i} does not precede the node", nid)
        args = [vals[i] for i in node.inputs]
        out = np.asarray(PRIMITIVES[node.op].forward(*args, **node.attrs), dtype=np.float64)
        if tape.check_finite and not np.all(np.isfinite(out)):
            raise GradError(f"non-finite value produced by {node.op}", nid)
        vals[nid] = out
    return vals


def backward(tape: Tape, vals: Sequence[np.ndarray], output: int) -> list[np.ndarray | None]:
    """Cotangents of every node for the scalar node ``output``."""
    if vals[output].size != 1:
        raise GradError(f"final node is not scalar (shape {vals[output].shape})", output)
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[output] = np.ones_like(vals[output])
    for nid in range(output, -1, -1):
        g = grads[nid]
        node = tape.nodes[nid]
        if g is None or node.op in ("input", "const"):
            continue
        need = [tape.nodes[i].needs_grad for i in node.inputs]
        if not any(need):
            continue
        ins = [vals[i] for i in node.inputs]
        cots = PRIMITIVES[node.op].vjp(g, vals[nid], ins, node.attrs, need)
        for i, c, nd in zip(node.inputs, cots, need):
            if not nd or c is None:
                continue
            c = np.asarray(c)
            grads[i] = c if grads[i] is None else grads[i] + c
    return grads


def grad(tape: Tape, output: Var) -> list[np.ndarray]:
    """Gradients of scalar ``output`` w.r.t. every tape input, using recorded values."""
    vals = [n.value for n in tape.nodes]
    grads = backward(tape, vals, output.id)
    return [
        np.zeros_like(vals[i]) if grads[i] is None else grads[i] for i in tape.input_ids
    ]


def forward_backward(tape: Tape, inputs: Sequence) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Replay the tape and differentiate its final output.

    Returns the values of ``tape.outputs`` (or of the last node when no output
    was marked) and the gradient of the final output w.r.t. each input.
    """
    if not tape.nodes:
        raise GradError("empty tape")
    out_ids = tape.outputs or [len(tape.nodes) - 1]
    vals = forward(tape, inputs)
    grads = backward(tape, vals, out_ids[-1])
    gin = [np.zeros_like(vals[i]) if grads[i] is None else grads[i] for i in tape.input_ids]
    return [vals[i] for i in out_ids], gin


def check_gradients(tape: Tape, point: Sequence, step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The error for each input coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 0.0 < step <= 1e-2:
        raise ValueError(f"step must lie in (0, 1e-2], got {step}")
    saved = tape.check_finite
    tape.check_finite = True
    try:
        outs, analytic = forward_backward(tape, point)
        out_id = (tape.outputs or [len(tape.nodes) - 1])[-1]
        if not np.all(np.isfinite(outs[-1])):
            raise GradError("non-finite output", out_id)
        worst = 0.0
        point = [np.array(p, dtype=np.float64, order="C") for p in point]
        for k, x in enumerate(point):
            flat = x.reshape(-1)
            ga = analytic[k].reshape(-1)
            if not np.all(np.isfinite(ga)):
                raise GradError("non-finite gradient", tape.input_ids[k])
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                fp = forward(tape, point)[out_id].item()
                flat[j] = orig - step
                fm = forward(tape, point)[out_id].item()
                flat[j] = orig
                num = (fp - fm) / (2.0 * step)
                err = abs(ga[j] - num) / max(1.0, abs(ga[j]))
                worst = max(worst, err)
        return worst
    finally:
        tape.check_finite = saved
