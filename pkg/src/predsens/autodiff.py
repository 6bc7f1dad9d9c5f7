"""Minimal reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every primitive as it executes, so the record is
topologically ordered by construction. :meth:`Tape.backward` walks it once
in reverse. Non-finite values abort the offending op with a
:class:`NumericalError` instead of propagating.

    >>> out = forward(lambda x: sigmoid(x), [np.zeros(1)])
    >>> float(grad(out, 0)[0])
    0.25
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the named op."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class NumericalError(ArithmeticError):
    """An op produced NaN or Inf."""

    def __init__(self, op: str, message: str = "non-finite value"):
        super().__init__(f"{op}: {message}")
        self.op = op


class TapeError(RuntimeError):
    pass


@dataclass
class _Node:
    op: str
    parents: tuple[int, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None
    shape: tuple[int, ...]
    is_variable: bool = False


class Tensor:
    """An array living on a tape. Use the module functions to combine them."""

    __slots__ = ("data", "tape", "index")
    __array_priority__ = 100.0

    def __init__(self, data: np.ndarray, tape: Tape, index: int):
        self.data = data
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.index})"


class Tape:
    """Ordered record of primitive ops."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.inputs: list[Tensor] = []

    def variable(self, value) -> Tensor:
        data = _as_array(value, "variable")
        t = self._push("variable", data, (), None)
        self.nodes[t.index].is_variable = True
        self.inputs.append(t)
        return t

    def constant(self, value) -> Tensor:
        return self._push("constant", _as_array(value, "constant"), (), None)

    def _push(self, op, data, parents, backward) -> Tensor:
        if not np.all(np.isfinite(data)):
            raise NumericalError(op)
        self.nodes.append(_Node(op, parents, backward, data.shape))
        return Tensor(data, self, len(self.nodes) - 1)

    def backward(self, output: Tensor, seed: np.ndarray, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        if output.tape is not self:
            raise TapeError("output was not recorded on this tape")
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise DimensionError("backward", f"seed shape {seed.shape} != output shape {output.shape}")
        grads: list[np.ndarray | None] = [None] * (output.index + 1)
        grads[output.index] = seed
        for idx in range(output.index, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or node.backward is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NumericalError(node.op, "non-finite gradient")
                grads[parent] = pg if grads[parent] is None else grads[parent] + pg
        out = []
        for t in wrt:
            if t.tape is not self:
                raise TapeError("wrt tensor belongs to a different tape")
            g = grads[t.index] if t.index < len(grads) else None
            out.append(np.zeros(t.shape) if g is None else g)
        return out


def _as_array(value, op: str) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(op, "non-finite input")
    return arr


def _lift(a, b) -> tuple[Tensor, Tensor]:
    tape = a.tape if isinstance(a, Tensor) else b.tape
    if isinstance(a, Tensor) and isinstance(b, Tensor) and a.tape is not b.tape:
        raise TapeError("operands recorded on different tapes")
    if not isinstance(a, Tensor):
        a = tape.constant(a)
    if not isinstance(b, Tensor):
        b = tape.constant(b)
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


def _unary(op: str, x: Tensor, value: np.ndarray, local: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    return x.tape._push(op, value, (x.index,), lambda g: (local(g),))


# -- binary ops ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return a.tape._push(
        "add", a.data + b.data, (a.index, b.index),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return a.tape._push(
        "sub", a.data - b.data, (a.index, b.index),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return a.tape._push(
        "mul", ad * bd, (a.index, b.index),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _lift(a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return a.tape._push("matmul", ad @ bd, (a.index, b.index), back)


# -- unary ops -----------------------------------------------------------------


def neg(x: Tensor) -> Tensor:
    return _unary("neg", x, -x.data, lambda g: -g)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _unary("sigmoid", x, s, lambda g: g * s * (1.0 - s))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _unary("tanh", x, t, lambda g: g * (1.0 - t * t))


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(np.float64)
    return _unary("relu", x, x.data * mask, lambda g: g * mask)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    return _unary("exp", x, e, lambda g: g * e)


def log(x: Tensor) -> Tensor:
    d = x.data
    if np.any(d <= 0):
        raise NumericalError("log", "argument must be positive")
    return _unary("log", x, np.log(d), lambda g: g / d)


def sqrt(x: Tensor) -> Tensor:
    d = x.data
    if np.any(d <= 0):
        raise NumericalError("sqrt", "argument must be positive")
    r = np.sqrt(d)
    return _unary("sqrt", x, r, lambda g: g / (2.0 * r))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)
    return _unary("abs", x, np.abs(x.data), lambda g: g * sign)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _unary("softmax", x, s, lambda g: s * (g - (g * s).sum(axis=axis, keepdims=True)))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _unary("log_softmax", x, out, lambda g: g - s * g.sum(axis=axis, keepdims=True))


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _unary("sum", x, np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), back)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    count = x.data.size if axis is None else shape[axis]

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / count, shape).copy()

    return _unary("mean", x, np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), back)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", f"cannot reshape {old} to {shape}") from None
    return _unary("reshape", x, out, lambda g: g.reshape(old))


def take(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table; gradient scatters back with accumulation."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise DimensionError("take", f"table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError("take", f"row id out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, ids, g)
        return (out,)

    return table.tape._push("take", table.data[ids], (table.index,), back)


# -- driver --------------------------------------------------------------------


def forward(graph: Callable[..., Tensor], inputs: Sequence) -> Tensor:
    """Run ``graph`` on fresh variables built from ``inputs``.

    The returned tensor carries its tape; the variables are ``out.tape.inputs``.
    """
    tape = Tape()
    xs = [tape.variable(v) for v in inputs]
    out = graph(*xs)
    if not isinstance(out, Tensor) or out.tape is not tape:
        raise TapeError("graph must return a tensor recorded on its own tape")
    return out


def grad(output: Tensor, k: int | None = None, wrt: Tensor | int = 0) -> np.ndarray:
    """Signed gradient of ``output[k]`` with respect to one input.

    ``k`` indexes a 1-D output; pass ``None`` for a scalar output. ``wrt`` is
    either a tensor on the same tape or a position in ``tape.inputs``.
    """
    tape = output.tape
    if not tape.nodes:
        raise TapeError("backward called before forward")
    if isinstance(wrt, int):
        if not 0 <= wrt < len(tape.inputs):
            raise TapeError(f"no input at position {wrt}")
        wrt = tape.inputs[wrt]
    seed = np.zeros(output.shape)
    if k is None:
        if output.data.size != 1:
            raise DimensionError("grad", f"output has shape {output.shape}; pass a class index")
        seed = np.ones(output.shape)
    else:
        if output.data.ndim != 1:
            raise DimensionError("grad", f"class-indexed output must be 1-D, got {output.shape}")
        if not 0 <= k < output.shape[0]:
            raise IndexError(f"class index {k} out of range for {output.shape[0]} outputs")
        seed[k] = 1.0
    return tape.backward(output, seed, [wrt])[0]


def jacobian(output: Tensor, wrt: Tensor | int = 0) -> np.ndarray:
    """Signed K x M Jacobian of a 1-D output, one backward pass per row."""
    rows = [grad(output, k, wrt).ravel() for k in range(output.shape[0])]
    return np.stack(rows)
