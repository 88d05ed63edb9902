"""Tape-based reverse-mode differentiation over dense float64 arrays.

Every primitive's backward rule is written once against a small backend
interface.  With ``create_graph=False`` the rules run directly on numpy
arrays; with ``create_graph=True`` they are recorded on the same tape as
ordinary nodes, so the returned gradients can be differentiated again.

Typical use::

    tape = Tape()
    x = tape.leaf(np.array([3.0]), requires_grad=True)
    y = tape.apply("sum", tape.apply("mul", x, x))
    (gx,) = gradient(tape, y, [x], create_graph=True)
    (ggx,) = gradient(tape, tape.apply("sum", gx), [x])
    tape.value(ggx)  # array([2.])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "NumericError",
    "ShapeError",
    "Node",
    "Tape",
    "as_tensor",
    "gradient",
    "grad_check",
    "OPS",
]

DIV_FLOOR = 1e-300
NORM_FLOOR = 1e-12


class NumericError(ArithmeticError):
    """A value became non-finite or a division hit a (near) zero denominator."""


class ShapeError(ValueError):
    pass


def as_tensor(value: Any) -> np.ndarray:
    """Return a read-only float64 copy of ``value``, rejecting NaN/Inf."""
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(slots=True)
class Node:
    id: int
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    requires_grad: bool
    attrs: dict = field(default_factory=dict)


class Tape:
    """Append-only record of nodes; ids are dense and parents precede children."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def value(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id].value

    def leaf(self, tensor: Any, requires_grad: bool = False) -> int:
        value = as_tensor(tensor)
        node = Node(len(self.nodes), "leaf", (), value, requires_grad)
        self.nodes.append(node)
        return node.id

    def const(self, tensor: Any) -> int:
        return self.leaf(tensor, requires_grad=False)

    def apply(self, op: str, *parents: int, **attrs: Any) -> int:
        try:
            spec = OPS[op]
        except KeyError:
            raise ValueError(f"unknown op {op!r}") from None
        if spec.arity is not None and len(parents) != spec.arity:
            raise ValueError(f"{op} takes {spec.arity} inputs, got {len(parents)}")
        nodes = self.nodes
        for p in parents:
            if not 0 <= p < len(nodes):
                raise ValueError(f"unknown node id {p}")
        values = [nodes[p].value for p in parents]
        out = spec.forward(values, attrs)
        out = np.asarray(out, dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"{op} produced non-finite values")
        out.setflags(write=False)
        requires_grad = any(nodes[p].requires_grad for p in parents)
        node = Node(len(nodes), op, tuple(parents), out, requires_grad, attrs)
        nodes.append(node)
        return node.id


# ---------------------------------------------------------------------------
# backends used by the backward rules


class _ArrayBackend:
    """Backward rules evaluated eagerly on numpy arrays."""

    def __init__(self, tape: Tape) -> None:
        self.tape = tape

    def handle(self, node_id: int) -> np.ndarray:
        return self.tape.nodes[node_id].value

    def val(self, h: np.ndarray) -> np.ndarray:
        return h

    def const(self, arr: np.ndarray) -> np.ndarray:
        return arr

    def op(self, name: str, *hs: np.ndarray, **attrs: Any) -> np.ndarray:
        return OPS[name].forward(list(hs), attrs)

    def to_node(self, h: np.ndarray) -> int:
        return self.tape.const(h)


class _GraphBackend:
    """Backward rules recorded on the tape, so they can be differentiated."""

    def __init__(self, tape: Tape) -> None:
        self.tape = tape

    def handle(self, node_id: int) -> int:
        return node_id

    def val(self, h: int) -> np.ndarray:
        return self.tape.nodes[h].value

    def const(self, arr: np.ndarray) -> int:
        return self.tape.const(arr)

    def op(self, name: str, *hs: int, **attrs: Any) -> int:
        return self.tape.apply(name, *hs, **attrs)

    def to_node(self, h: int) -> int:
        return h


# ---------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class _OpSpec:
    arity: int | None
    forward: Callable[[list[np.ndarray], dict], np.ndarray]
    # vjp(backend, g, parent_handles, out_handle, attrs, needs) -> list of handles/None
    vjp: Callable[..., list]


OPS: dict[str, _OpSpec] = {}


def _register(name: str, arity: int | None):
    def deco(cls):
        OPS[name] = _OpSpec(arity, cls.forward, cls.vjp)
        return cls

    return deco


def _unbroadcast(arr: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if arr.shape == shape:
        return arr
    while arr.ndim > len(shape):
        arr = arr.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and arr.shape[axis] != 1:
            arr = arr.sum(axis=axis, keepdims=True)
    return arr


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def _reduce_to(B, g, shape: tuple[int, ...]):
    if B.val(g).shape == shape:
        return g
    return B.op("sum_to", g, shape=shape)


@_register("add", 2)
class _Add:
    @staticmethod
    def forward(v, attrs):
        _broadcast_shape(v[0], v[1])
        return v[0] + v[1]

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        return [
            _reduce_to(B, g, B.val(p[0]).shape) if needs[0] else None,
            _reduce_to(B, g, B.val(p[1]).shape) if needs[1] else None,
        ]


@_register("subtract", 2)
class _Sub:
    @staticmethod
    def forward(v, attrs):
        _broadcast_shape(v[0], v[1])
        return v[0] - v[1]

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        gb = None
        if needs[1]:
            gb = _reduce_to(B, B.op("scale", g, c=-1.0), B.val(p[1]).shape)
        return [_reduce_to(B, g, B.val(p[0]).shape) if needs[0] else None, gb]


@_register("mul", 2)
class _Mul:
    @staticmethod
    def forward(v, attrs):
        _broadcast_shape(v[0], v[1])
        return v[0] * v[1]

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        a, b = p
        ga = _reduce_to(B, B.op("mul", g, b), B.val(a).shape) if needs[0] else None
        gb = _reduce_to(B, B.op("mul", g, a), B.val(b).shape) if needs[1] else None
        return [ga, gb]


@_register("divide", 2)
class _Div:
    @staticmethod
    def forward(v, attrs):
        _broadcast_shape(v[0], v[1])
        if np.any(np.abs(v[1]) < DIV_FLOOR):
            raise NumericError("division by a value with magnitude below 1e-300")
        return v[0] / v[1]

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        a, b = p
        ga = gb = None
        g_over_b = B.op("divide", g, b)
        if needs[0]:
            ga = _reduce_to(B, g_over_b, B.val(a).shape)
        if needs[1]:
            # d(a/b)/db = -(a/b)/b
            t = B.op("mul", g_over_b, out)
            gb = _reduce_to(B, B.op("scale", t, c=-1.0), B.val(b).shape)
        return [ga, gb]


@_register("scale", 1)
class _Scale:
    @staticmethod
    def forward(v, attrs):
        return v[0] * float(attrs["c"])

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        return [B.op("scale", g, c=attrs["c"])]


@_register("matmul", 2)
class _Matmul:
    @staticmethod
    def forward(v, attrs):
        a, b = v
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not conform")
        return a @ b

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        a, b = p
        ga = B.op("matmul", g, B.op("transpose", b)) if needs[0] else None
        gb = B.op("matmul", B.op("transpose", a), g) if needs[1] else None
        return [ga, gb]


@_register("transpose", 1)
class _Transpose:
    @staticmethod
    def forward(v, attrs):
        if v[0].ndim != 2:
            raise ShapeError("transpose expects a matrix")
        return v[0].T

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        return [B.op("transpose", g)]


@_register("relu", 1)
class _Relu:
    @staticmethod
    def forward(v, attrs):
        return np.maximum(v[0], 0.0)

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        return [B.op("step_mul", g, p[0])]


@_register("step_mul", 2)
class _StepMul:
    """g * (x > 0).  The mask is piecewise constant, so x receives no gradient."""

    @staticmethod
    def forward(v, attrs):
        g, x = v
        if g.shape != x.shape:
            raise ShapeError("step_mul operands must share a shape")
        return np.where(x > 0.0, g, 0.0)

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        return [B.op("step_mul", g, p[1]) if needs[0] else None, None]


@_register("floor", 1)
class _Floor:
    """max(x, lo) with a zero subgradient below the floor."""

    @staticmethod
    def forward(v, attrs):
        return np.maximum(v[0], float(attrs["lo"]))

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        shifted = B.op("add", p[0], B.const(np.float64(-float(attrs["lo"]))))
        return [B.op("step_mul", g, shifted)]


@_register("sqrt", 1)
class _Sqrt:
    @staticmethod
    def forward(v, attrs):
        if np.any(v[0] < 0):
            raise NumericError("sqrt of a negative value")
        return np.sqrt(v[0])

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        return [B.op("scale", B.op("divide", g, out), c=0.5)]


@_register("sum", 1)
class _Sum:
    @staticmethod
    def forward(v, attrs):
        return np.asarray(v[0].sum())

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        return [B.op("broadcast_to", g, shape=B.val(p[0]).shape)]


@_register("sum_to", 1)
class _SumTo:
    @staticmethod
    def forward(v, attrs):
        shape = tuple(attrs["shape"])
        try:
            np.broadcast_shapes(shape, v[0].shape)
        except ValueError:
            raise ShapeError(f"cannot reduce {v[0].shape} to {shape}") from None
        return _unbroadcast(v[0], shape)

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        return [B.op("broadcast_to", g, shape=B.val(p[0]).shape)]


@_register("broadcast_to", 1)
class _BroadcastTo:
    @staticmethod
    def forward(v, attrs):
        try:
            return np.broadcast_to(v[0], tuple(attrs["shape"])).copy()
        except ValueError:
            raise ShapeError(f"cannot broadcast {v[0].shape} to {attrs['shape']}") from None

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        return [_reduce_to(B, g, B.val(p[0]).shape)]


@_register("dot", 2)
class _Dot:
    @staticmethod
    def forward(v, attrs):
        a, b = v
        if a.ndim != 1 or a.shape != b.shape:
            raise ShapeError(f"dot needs two equal-length vectors, got {a.shape}, {b.shape}")
        return np.asarray(a @ b)

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        a, b = p
        return [
            B.op("mul", g, b) if needs[0] else None,
            B.op("mul", g, a) if needs[1] else None,
        ]


@_register("l2_norm", 1)
class _L2Norm:
    @staticmethod
    def forward(v, attrs):
        return np.asarray(np.sqrt(np.sum(v[0] * v[0])))

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        if float(B.val(out)) == 0.0:
            # subgradient 0 at the origin
            return [B.const(np.zeros_like(B.val(p[0])))]
        return [B.op("mul", B.op("divide", g, out), p[0])]


@_register("reshape", 1)
class _Reshape:
    @staticmethod
    def forward(v, attrs):
        try:
            return v[0].reshape(tuple(attrs["shape"]))
        except ValueError:
            raise ShapeError(f"cannot reshape {v[0].shape} to {attrs['shape']}") from None

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        return [B.op("reshape", g, shape=B.val(p[0]).shape)]


@_register("concat", None)
class _Concat:
    """Concatenate 1-D vectors."""

    @staticmethod
    def forward(v, attrs):
        if any(x.ndim != 1 for x in v):
            raise ShapeError("concat expects 1-D inputs")
        return np.concatenate(v)

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        grads, start = [], 0
        for h, need in zip(p, needs):
            n = B.val(h).shape[0]
            grads.append(B.op("slice", g, start=start, stop=start + n) if need else None)
            start += n
        return grads


@_register("slice", 1)
class _Slice:
    @staticmethod
    def forward(v, attrs):
        return v[0][attrs["start"]:attrs["stop"]].copy()

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        n = B.val(p[0]).shape[0]
        return [B.op("pad", g, start=attrs["start"], total=n)]


@_register("pad", 1)
class _Pad:
    """Embed a vector into zeros of length ``total`` at offset ``start``."""

    @staticmethod
    def forward(v, attrs):
        out = np.zeros(attrs["total"])
        out[attrs["start"]:attrs["start"] + v[0].shape[0]] = v[0]
        return out

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        n = B.val(p[0]).shape[0]
        return [B.op("slice", g, start=attrs["start"], stop=attrs["start"] + n)]


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


@_register("softmax", 1)
class _Softmax:
    @staticmethod
    def forward(v, attrs):
        if v[0].ndim != 2:
            raise ShapeError("softmax expects a matrix")
        return _softmax_rows(v[0])

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        n = B.val(out).shape[0]
        inner = B.op("sum_to", B.op("mul", g, out), shape=(n, 1))
        return [B.op("mul", out, B.op("subtract", g, inner))]


@_register("softmax_ce", 2)
class _SoftmaxCE:
    """Mean over rows of -sum(Y * log_softmax(Z)) for a constant target matrix Y."""

    @staticmethod
    def forward(v, attrs):
        z, y = v
        if z.ndim != 2 or z.shape != y.shape:
            raise ShapeError(f"softmax_ce needs matching [n x K] inputs, got {z.shape}, {y.shape}")
        zmax = z.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
        return np.asarray(np.mean(lse * y.sum(axis=1) - (y * z).sum(axis=1)))

    @staticmethod
    def vjp(B, g, p, out, attrs, needs):
        if needs[1]:
            raise ValueError("softmax_ce targets must be constants")
        z, y = p
        n = B.val(z).shape[0]
        diff = B.op("subtract", B.op("softmax", z), y)
        return [B.op("mul", diff, B.op("scale", g, c=1.0 / n)), None]


# ---------------------------------------------------------------------------


def gradient(
    tape: Tape, output: int, wrt: Sequence[int], create_graph: bool = False
) -> list[int]:
    """Return node ids holding d(output)/d(wrt[i]).

    ``output`` must be a scalar node.  Inputs that the output does not depend
    on get an all-zero gradient rather than an error.  With ``create_graph``
    the backward computation is itself recorded and differentiable.
    """
    nodes = tape.nodes
    if nodes[output].value.size != 1 or nodes[output].value.ndim != 0:
        raise ShapeError("gradient needs a scalar output")
    for w in wrt:
        if not nodes[w].requires_grad:
            raise ValueError(f"node {w} does not require grad")

    B = _GraphBackend(tape) if create_graph else _ArrayBackend(tape)
    adj: dict[int, Any] = {output: B.const(np.asarray(1.0))}
    for i in range(output, -1, -1):
        g = adj.get(i)
        if g is None:
            continue
        node = nodes[i]
        if node.op == "leaf":
            continue
        needs = [nodes[p].requires_grad for p in node.parents]
        if not any(needs):
            continue
        parent_handles = [B.handle(p) for p in node.parents]
        grads = OPS[node.op].vjp(B, g, parent_handles, B.handle(i), node.attrs, needs)
        for p, need, gp in zip(node.parents, needs, grads):
            if not need or gp is None:
                continue
            prev = adj.get(p)
            adj[p] = gp if prev is None else B.op("add", prev, gp)

    result = []
    for w in wrt:
        g = adj.get(w)
        if g is None:
            result.append(tape.const(np.zeros_like(nodes[w].value)))
        else:
            result.append(B.to_node(g))
    return result


def grad_check(fn: Callable[[Tape, int], int], point: Any, eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn(tape, x_id)`` must build a scalar node from the leaf ``x_id``.
    The per-coordinate error is |a - n| / max(1, |a|, |n|).
    """
    if not 1e-8 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-8, 1e-3]")
    x0 = np.array(point, dtype=np.float64)

    def evaluate(x: np.ndarray) -> float:
        t = Tape()
        return float(t.value(fn(t, t.leaf(x, requires_grad=True))))

    tape = Tape()
    x_id = tape.leaf(x0, requires_grad=True)
    (g_id,) = gradient(tape, fn(tape, x_id), [x_id])
    analytic = tape.value(g_id).ravel()

    numeric = np.empty_like(analytic)
    flat = x0.ravel()
    for k in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[k] += eps
        down[k] -= eps
        numeric[k] = (evaluate(up.reshape(x0.shape)) - evaluate(down.reshape(x0.shape))) / (2 * eps)

    if analytic.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
