"""Dense tensors with tape-based reverse-mode differentiation.

Values are numpy arrays (C-contiguous, float32 or float64). Operations are
recorded on the innermost active :class:`Tape` whenever one of their inputs
requires a gradient; outside a tape nothing is recorded, which is how
evaluation runs.

    with Tape() as tape:
        loss = sum_(silu(x))
    grads = backward(loss, tape)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DTypeError, GradientError, NumericError, ShapeError

# Additive mask value for forbidden attention positions. Finite so that
# sentinel - sentinel never produces NaN.
MASK_SENTINEL = 1e30

_DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


def as_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str) and dtype in _DTYPES:
        return _DTYPES[dtype]
    dt = np.dtype(dtype)
    if dt not in _DTYPE_NAMES:
        raise DTypeError(f"unsupported dtype {dtype!r}; use f32 or f64")
    return dt


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape", "name")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _DTYPE_NAMES:
                dtype = data.dtype
            else:
                dtype = np.float32
        arr = np.ascontiguousarray(data, dtype=as_dtype(dtype))
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def dtype_name(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype_name}{flag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> dict:
        return backward(self, self._tape)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Append-only record of differentiable operations.

    Nodes are appended in execution order, so a node's inputs always have
    smaller indices and reverse append order is a valid topological order.
    A tape supports exactly one :func:`backward` pass.
    """

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise GradientError("tapes must be exited in LIFO order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward_fn) -> None:
        output.node_id = len(self.nodes)
        output._tape = self
        output.requires_grad = True
        self.nodes.append(Node(op, inputs, output, backward_fn))


def apply_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``data`` in a Tensor and record it if any input needs a gradient.

    ``backward_fn(grad_out)`` returns one gradient (or None) per input.
    """
    out = Tensor(data, dtype=data.dtype)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, tuple(inputs), out, backward_fn)
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss) to every ``requires_grad`` leaf reachable on ``tape``.

    Leaf gradients are written to ``leaf.grad`` and also returned as a map.
    Leaves must have ``grad is None`` beforehand (see :func:`zero_grads`).
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else loss._tape
    if tape is None or loss._tape is not tape or loss.node_id is None:
        raise GradientError("loss was not produced on this tape")
    if tape.consumed:
        raise GradientError("backward already ran on this tape; record a new one")
    tape.consumed = True

    grads: list[Optional[np.ndarray]] = [None] * (loss.node_id + 1)
    grads[loss.node_id] = np.ones_like(loss.data)
    leaf_grads: dict[int, list] = {}

    for idx in range(loss.node_id, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        grads[idx] = None
        node = tape.nodes[idx]
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is tape and inp.node_id is not None:
                prev = grads[inp.node_id]
                grads[inp.node_id] = gi if prev is None else prev + gi
            else:
                entry = leaf_grads.get(id(inp))
                if entry is None:
                    leaf_grads[id(inp)] = [inp, gi]
                else:
                    entry[1] = entry[1] + gi

    stale = [t for t, _ in leaf_grads.values() if t.grad is not None]
    if stale:
        names = ", ".join(t.name or repr(t) for t in stale[:3])
        raise GradientError(f"gradient already populated for {names}; call zero_grads first")
    result = {}
    for t, g in leaf_grads.values():
        t.grad = np.ascontiguousarray(g, dtype=t.dtype).reshape(t.shape)
        result[t] = t.grad
    return result


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------

def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=like.dtype if like is not None else np.float32)


def _same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise DTypeError(f"{op}: dtype mismatch {a.dtype_name} vs {b.dtype_name}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary_operands(a, b, op):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _same_dtype(a, b, op)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return apply_op("add", a.data + b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return apply_op("sub", a.data - b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    return apply_op("mul", a.data * b.data, (a, b),
                    lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return apply_op("scale", x.data * c, (x,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _same_dtype(a, b, "matmul")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            # fold batch axes into rows: one GEMM instead of a batched sum
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return apply_op("matmul", out, (a, b), grad_fn)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose needs at least 2 dims, got shape {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return apply_op("transpose", np.ascontiguousarray(np.transpose(x.data, axes)), (x,),
                    lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return apply_op("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    width = x.shape[-1]

    def grad_fn(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    if not 0 <= start <= stop <= width:
        raise ShapeError(f"slice [{start}:{stop}] out of range for last dim {width}")
    return apply_op("slice_last", np.ascontiguousarray(x.data[..., start:stop]), (x,), grad_fn)


def split_half_last(x: Tensor) -> tuple[Tensor, Tensor]:
    """Split the last axis into equal first and second halves."""
    width = x.shape[-1] if x.ndim else 0
    if x.ndim == 0 or width % 2:
        raise ShapeError(f"split_half_last needs an even last dimension, got shape {x.shape}")
    half = width // 2
    return slice_last(x, 0, half), slice_last(x, half, width)


def concat_last(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_last of an empty sequence")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        _same_dtype(tensors[0], t, "concat_last")
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_last: leading shapes differ, {tensors[0].shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=-1)
    return apply_op("concat_last", out, tuple(tensors),
                    lambda g: tuple(np.ascontiguousarray(g[..., lo:hi])
                                    for lo, hi in zip(bounds[:-1], bounds[1:])))


def sum_(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply_op("sum", np.asarray(out, dtype=x.dtype), (x,), grad_fn)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Rows of a 2-D table selected by an integer index array of any shape."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D table, got shape {table.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"gather_rows needs integer indices, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"row index out of range for table with {table.shape[0]} rows")

    def grad_fn(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return apply_op("gather_rows", table.data[ids], (table,), grad_fn)


# --------------------------------------------------------------------------
# Activations and softmax
# --------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow of exp(-x) for large negative x
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _silu_grad(x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return apply_op("relu", np.maximum(x.data, x.dtype.type(0)), (x,),
                        lambda g: (g * (x.data > 0),))
    if kind == "sigmoid":
        s = _sigmoid(x.data)
        return apply_op("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))
    if kind == "silu":
        return apply_op("silu", x.data * _sigmoid(x.data), (x,),
                        lambda g: (g * _silu_grad(x.data),))
    raise ValueError(f"unknown activation {kind!r}; expected relu, sigmoid or silu")


def relu(x: Tensor) -> Tensor:
    return activation("relu", x)


def sigmoid(x: Tensor) -> Tensor:
    return activation("sigmoid", x)


def silu(x: Tensor) -> Tensor:
    return activation("silu", x)


def softmax_last(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis with an optional additive mask.

    Mask entries are 0 (allowed) or ``-MASK_SENTINEL`` (forbidden); a row
    with no allowed entry raises.
    """
    z = x.data
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        m = m.astype(x.dtype, copy=False)
        try:
            np.broadcast_shapes(m.shape, x.shape)
        except ValueError:
            raise ShapeError(f"mask shape {m.shape} does not broadcast to {x.shape}") from None
        if np.any(np.all(m <= -0.5 * MASK_SENTINEL, axis=-1)):
            raise NumericError("softmax over a fully-masked row is undefined")
        z = z + m
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return apply_op("softmax", y, (x,), grad_fn)
