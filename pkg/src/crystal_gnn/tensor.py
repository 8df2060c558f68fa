"""Minimal reverse-mode differentiation over dense float64 arrays.

A :class:`Value` wraps a numpy array and remembers which operation produced
it. Calling :func:`backward` on a scalar ``Value`` walks the graph once in
reverse topological order and accumulates gradients into every leaf that was
created with ``requires_grad=True``.

Only first-order gradients are supported; backward rules operate on raw
arrays and never build new graph nodes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

Array = np.ndarray
BackwardFn = Callable[[Array], Sequence["Array | None"]]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an operation is called outside its contract."""


class Value:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(
        self,
        data,
        parents: tuple["Value", ...] = (),
        backward_fn: BackwardFn | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.shape})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def _wrap(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def constant(x) -> Value:
    return Value(x)


def parameter(x, name: str | None = None) -> Value:
    return Value(np.array(x, dtype=np.float64), requires_grad=True, name=name)


def make_op(data: Array, parents: Sequence[Value], backward_fn: BackwardFn) -> Value:
    """Create a graph node; ``backward_fn(g)`` returns one gradient per parent."""
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Value(data)
    return Value(data, parents, backward_fn)


def check_finite(x: Value | Array, where: str = "tensor") -> None:
    data = x.data if isinstance(x, Value) else np.asarray(x)
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values in {where}")


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Value, b: Value) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Value, b: Value) -> Value:
    _broadcast_shape(a, b)
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Value, b: Value) -> Value:
    _broadcast_shape(a, b)
    return make_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Value, b: Value) -> Value:
    _broadcast_shape(a, b)
    return make_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Value, c: float) -> Value:
    return make_op(a.data * c, (a,), lambda g: (g * c,))


def _sigmoid(x: Array) -> Array:
    return expit(x)


def sigmoid(x: Value) -> Value:
    s = _sigmoid(x.data)
    return make_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Value) -> Value:
    s = _sigmoid(x.data)
    out = x.data * s
    return make_op(out, (x,), lambda g: (g * (s + out * (1.0 - s)),))


def _layernorm_forward(x: Array, eps: float) -> tuple[Array, Array]:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv, inv


def _layernorm_backward(gxhat: Array, xhat: Array, inv: Array) -> Array:
    # d/dx of (x - mean) / sqrt(var + eps), population variance
    return inv * (
        gxhat
        - gxhat.mean(axis=-1, keepdims=True)
        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
    )


def layernorm(x: Value, gain: Value, offset: Value, eps: float = 1e-5) -> Value:
    """Normalize over the last axis with population variance, then ``xhat*gain + offset``."""
    d = x.shape[-1]
    if gain.shape != (d,) or offset.shape != (d,):
        raise DimensionError(f"layernorm gain/offset must have shape ({d},)")
    xhat, inv = _layernorm_forward(x.data, eps)
    out = xhat * gain.data + offset.data

    def backward(g):
        gx = _layernorm_backward(g * gain.data, xhat, inv)
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op(out, (x, gain, offset), backward)


def huber(x: Value, delta: float) -> Value:
    """Elementwise Huber function of a residual."""
    a = np.abs(x.data)
    quad = a <= delta
    out = np.where(quad, 0.5 * x.data * x.data, delta * (a - 0.5 * delta))
    return make_op(out, (x,), lambda g: (g * np.where(quad, x.data, delta * np.sign(x.data)),))


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a: Value, b: Value) -> Value:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return make_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Value, weight: Value, bias: Value | None = None) -> Value:
    """``x @ weight + bias`` as a single node."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear shape mismatch {x.shape} @ {weight.shape}")
    out = x.data @ weight.data
    if bias is None:
        return make_op(out, (x, weight), lambda g: (g @ weight.data.T, x.data.T @ g))
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} does not match {weight.shape}")
    out += bias.data
    return make_op(
        out,
        (x, weight, bias),
        lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)),
    )


def affine(x: Value, wb: Value) -> Value:
    """``x @ wb[:-1] + wb[-1]``: a linear layer stored as one augmented matrix."""
    if x.data.ndim != 2 or wb.data.ndim != 2 or x.shape[1] + 1 != wb.shape[0]:
        raise DimensionError(f"affine shape mismatch {x.shape} with weights {wb.shape}")
    w = wb.data[:-1]
    out = x.data @ w + wb.data[-1]

    def backward(g):
        gw = np.empty_like(wb.data)
        gw[:-1] = x.data.T @ g
        gw[-1] = g.sum(axis=0)
        return g @ w.T, gw

    return make_op(out, (x, wb), backward)


def rows(x: Value, start: int, stop: int) -> Value:
    """Slice ``x[start:stop]`` along the first axis."""
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return make_op(x.data[start:stop], (x,), backward)


def concat(values: Sequence[Value], axis: int = -1) -> Value:
    values = tuple(values)
    if not values:
        raise DimensionError("concat of nothing")
    nd = values[0].data.ndim
    ax = axis % nd
    for v in values[1:]:
        if v.data.ndim != nd or any(
            v.shape[i] != values[0].shape[i] for i in range(nd) if i != ax
        ):
            raise DimensionError(f"concat shape mismatch {values[0].shape} vs {v.shape}")
    widths = [v.shape[ax] for v in values]
    bounds = np.cumsum([0] + widths)
    out = np.concatenate([v.data for v in values], axis=ax)

    def backward(g):
        index = [slice(None)] * nd
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[ax] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return grads

    return make_op(out, values, backward)


def columns(x: Value, start: int, stop: int) -> Value:
    """Slice ``x[..., start:stop]``."""
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return make_op(x.data[..., start:stop], (x,), backward)


def reshape(x: Value, shape: tuple[int, ...]) -> Value:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return make_op(out, (x,), lambda g: (g.reshape(old),))


def total(x: Value) -> Value:
    """Sum of all elements as a 0-d value."""
    shape = x.shape
    return make_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Value) -> Value:
    n = x.data.size
    return scale(total(x), 1.0 / n)


# ---------------------------------------------------------------------------
# indexed gather / scatter


def _segment_sum_array(values: Array, ids: Array, num_segments: int) -> Array:
    """Sum rows of ``values`` by id, sequentially within each segment."""
    out = np.zeros((num_segments,) + values.shape[1:])
    if ids.size == 0:
        return out
    if ids.size > 1 and np.any(ids[1:] < ids[:-1]):
        order = np.argsort(ids, kind="stable")
        ids = ids[order]
        values = values[order]
    starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
    out[ids[starts]] = np.add.reduceat(values, starts, axis=0)
    return out


def segment_sum(values: Value, segment_ids, num_segments: int) -> Value:
    """Row ``s`` of the result is the sum of input rows whose id is ``s``."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] != values.shape[0]:
        raise DimensionError(
            f"segment ids of shape {ids.shape} do not match values {values.shape}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise IndexError(f"segment id out of range for {num_segments} segments")
    out = _segment_sum_array(values.data, ids, num_segments)
    return make_op(out, (values,), lambda g: (g[ids],))


def gather(x: Value, index) -> Value:
    """Rows ``x[index]``; the adjoint scatters back with a segment sum."""
    idx = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather index out of range for {n} rows")
    return make_op(x.data[idx], (x,), lambda g: (_segment_sum_array(g, idx, n),))


# ---------------------------------------------------------------------------
# dispatcher and backward


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "sigmoid": sigmoid,
    "silu": silu,
    "layernorm": layernorm,
    "concat": lambda *xs: concat(xs),
    "huber": huber,
}


def elementwise(op: str, *args, **kwargs) -> Value:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)


def _topological_order(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Value, wrt: Iterable[Value] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Leaves listed in ``wrt`` that the loss does not reach get a zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    for p in wrt:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                node.grad += g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
