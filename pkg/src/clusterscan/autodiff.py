"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable computation in the package is written against
:class:`Tensor`. Operations executed while a :class:`Tape` is active (and that
touch at least one tensor requiring gradients) append a node to that tape;
:meth:`Tape.backward` walks the nodes in reverse append order.

    >>> x = Tensor([2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)
    >>> x.grad
    array([4., 6.])
"""

from __future__ import annotations

import os
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import instrument


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated."""


_PRECISIONS = {
    "float64": np.float64,
    "64": np.float64,
    "double": np.float64,
    "float32": np.float32,
    "32": np.float32,
    "single": np.float32,
}

PRECISION_ENV = "CLUSTERSCAN_PRECISION"


def _parse_precision(value) -> np.dtype:
    if isinstance(value, np.dtype) or value in (np.float32, np.float64):
        return np.dtype(value)
    key = str(value).strip().lower()
    if key not in _PRECISIONS:
        raise ValueError(f"unknown precision {value!r}; use 32 or 64")
    return np.dtype(_PRECISIONS[key])


_dtype = _parse_precision(os.environ.get(PRECISION_ENV, "64"))


def get_dtype() -> np.dtype:
    return _dtype


def set_precision(value) -> np.dtype:
    """Set the build-wide floating type; returns the previous one."""
    global _dtype
    previous = _dtype
    _dtype = _parse_precision(value)
    return previous


@contextmanager
def precision(value):
    previous = set_precision(value)
    try:
        yield _dtype
    finally:
        set_precision(previous)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording on this thread."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tape:
    """Append-only record of differentiable operations.

    Each node is ``(op_name, parents, backward_fn)``; ``backward_fn`` maps the
    gradient of the node output to a tuple of parent gradients (``None`` for
    parents that need none).
    """

    def __init__(self):
        self.nodes: list[tuple[str, tuple, Callable]] = []
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, name: str, out: "Tensor", parents: tuple, backward: Callable) -> None:
        out._node = len(self.nodes)
        out._tape = self
        self.nodes.append((name, parents, backward))
        for p in parents:
            if p.requires_grad and p._node is None:
                self._leaves[id(p)] = p

    def reset(self) -> None:
        self.nodes.clear()
        self._leaves.clear()

    def backward(self, root: "Tensor") -> None:
        if root.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        if root._tape is not self or root._node is None:
            raise ContractError("root was not produced on this tape")
        grads: dict[int, np.ndarray] = {root._node: np.ones_like(root.data)}
        for idx in range(root._node, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            _, parents, fn = self.nodes[idx]
            for p, pg in zip(parents, fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None:
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                elif p._tape is self:
                    prev = grads.get(p._node)
                    grads[p._node] = pg if prev is None else prev + pg
        for leaf in self._leaves.values():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=get_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._node = None
        self._tape = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._node = None
        t._tape = None
        return t

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise ContractError("tensor was not produced on a tape")
        self._tape.backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, o):
        return elementwise("add", self, o)

    def __radd__(self, o):
        return elementwise("add", o, self)

    def __sub__(self, o):
        return elementwise("sub", self, o)

    def __rsub__(self, o):
        return elementwise("sub", o, self)

    def __mul__(self, o):
        return elementwise("mul", self, o)

    def __rmul__(self, o):
        return elementwise("mul", o, self)

    def __truediv__(self, o):
        return elementwise("div", self, o)

    def __rtruediv__(self, o):
        return elementwise("div", o, self)

    def __neg__(self):
        return elementwise("mul", self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def sqrt(self):
        return elementwise("sqrt", self)

    def abs(self):
        return elementwise("abs", self)

    def sigmoid(self):
        return elementwise("sigmoid", self)

    def silu(self):
        return elementwise("silu", self)

    def relu(self):
        return elementwise("relu", self)

    def softplus(self):
        return elementwise("softplus", self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=get_dtype()))


def tensor(shape, fill=None, values=None, requires_grad: bool = False, name=None) -> Tensor:
    """Create a tensor of ``shape`` from a scalar ``fill`` or a flat ``values`` list."""
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeError(f"negative extent in {shape}")
    if values is not None:
        flat = np.asarray(values, dtype=get_dtype()).reshape(-1)
        if flat.size != int(np.prod(shape, dtype=np.int64)):
            raise ShapeError(f"{flat.size} values cannot fill shape {shape}")
        data = flat.reshape(shape).copy()
    else:
        data = np.full(shape, 0.0 if fill is None else fill, dtype=get_dtype())
    out = Tensor._wrap(data, requires_grad)
    out.name = name
    return out


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def record_op(name: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of a custom op and record it if needed.

    ``backward(g)`` must return one gradient (or ``None``) per parent.
    """
    tape = active_tape()
    parents = tuple(parents)
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, track)
    if track:
        tape.record(name, out, parents, backward)
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def broadcast_shape(*shapes) -> tuple:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as err:
        raise ShapeError(f"shapes {shapes} do not broadcast") from err


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

_UNARY = {"exp", "log", "sqrt", "abs", "sigmoid", "silu", "relu", "softplus"}
_BINARY = {"add", "sub", "mul", "div"}
_TRANSCENDENTAL = {"exp", "log", "sqrt", "sigmoid", "silu", "softplus", "div"}


def softplus_array(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def elementwise(op: str, a, b=None) -> Tensor:
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return _binary(op, as_tensor(a), as_tensor(b))
    if op in _UNARY:
        if b is not None:
            raise ContractError(f"{op} takes a single operand")
        return _unary(op, as_tensor(a))
    raise ValueError(f"unknown elementwise op {op!r}")


def _binary(op: str, a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)
    x, y = a.data, b.data
    sa, sb = a.shape, b.shape
    if op == "add":
        out = x + y

        def bw(g):
            return unbroadcast(g, sa), unbroadcast(g, sb)
    elif op == "sub":
        out = x - y

        def bw(g):
            return unbroadcast(g, sa), unbroadcast(-g, sb)
    elif op == "mul":
        out = x * y

        def bw(g):
            return (
                unbroadcast(g * y, sa) if a.requires_grad else None,
                unbroadcast(g * x, sb) if b.requires_grad else None,
            )
    else:
        out = x / y
        instrument.add_transcendentals(out.size)

        def bw(g):
            ga = unbroadcast(g / y, sa) if a.requires_grad else None
            gb = unbroadcast(-g * out / y, sb) if b.requires_grad else None
            return ga, gb
    return record_op(op, out, (a, b), bw)


def _unary(op: str, a: Tensor) -> Tensor:
    x = a.data
    if op == "exp":
        out = np.exp(x)

        def bw(g):
            return (g * out,)
    elif op == "log":
        out = np.log(x)

        def bw(g):
            return (g / x,)
    elif op == "sqrt":
        out = np.sqrt(x)

        def bw(g):
            return (g * 0.5 / out,)
    elif op == "abs":
        out = np.abs(x)

        def bw(g):
            return (g * np.sign(x),)
    elif op == "relu":
        out = np.maximum(x, 0)

        def bw(g):
            return (g * (x > 0),)
    elif op == "sigmoid":
        out = expit(x)

        def bw(g):
            return (g * out * (1 - out),)
    elif op == "silu":
        s = expit(x)
        out = x * s

        def bw(g):
            return (g * s * (1 + x * (1 - s)),)
    else:  # softplus
        out = softplus_array(x)

        def bw(g):
            return (g * expit(x),)
    if op in _TRANSCENDENTAL:
        instrument.add_transcendentals(out.size)
    return record_op(op, out, (a,), bw)


def exp(x):
    return elementwise("exp", x)


def log(x):
    return elementwise("log", x)


def sqrt(x):
    return elementwise("sqrt", x)


def sigmoid(x):
    return elementwise("sigmoid", x)


def silu(x):
    return elementwise("silu", x)


def relu(x):
    return elementwise("relu", x)


def softplus(x):
    return elementwise("softplus", x)


# ---------------------------------------------------------------------------
# Linear algebra and reductions
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    out = np.matmul(x, y)
    instrument.add_macs(out.size * x.shape[-1])

    def bw(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), x.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), y.shape) if b.requires_grad else None
        return ga, gb

    return record_op("matmul", out, (a, b), bw)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = axis if isinstance(axis, tuple) else (axis,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def reduce(op: str, x, axis=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axis`` (an int, a tuple, or ``None`` for all)."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    data = x.data
    shape = x.shape
    if op in ("sum", "mean"):
        out = data.sum(axis=axes, keepdims=keepdims)
        count = data.size if axes is None else int(np.prod([shape[a] for a in axes]))
        scale = 1.0
        if op == "mean":
            out = out / count
            scale = 1.0 / count

        def bw(g):
            if not keepdims and axes is not None:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g * scale, shape).copy(),)
    elif op == "max":
        if axes is not None and len(axes) > 1:
            raise ContractError("max reduces over a single axis")
        if axes is None:
            flat = data.reshape(-1)
            idx = int(np.argmax(flat))
            out = flat[idx].reshape((1,) * data.ndim if keepdims else ())

            def bw(g):
                full = np.zeros(data.size, dtype=data.dtype)
                full[idx] = g.reshape(-1)[0]
                return (full.reshape(shape),)
        else:
            ax = axes[0]
            idx = np.expand_dims(np.argmax(data, axis=ax), ax)
            out = np.take_along_axis(data, idx, axis=ax)
            if not keepdims:
                out = out.squeeze(ax)

            def bw(g):
                full = np.zeros(shape, dtype=data.dtype)
                gk = g if keepdims else np.expand_dims(g, ax)
                np.put_along_axis(full, idx, gk, axis=ax)
                return (full,)
    else:
        raise ValueError(f"unknown reduction {op!r}")
    return record_op(op, np.asarray(out), (x,), bw)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(str(err)) from err
    return record_op("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return record_op("transpose", out, (x,), lambda g: (np.transpose(g, inverse),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    out = x.data[idx]
    shape, dtype = x.shape, x.dtype
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return record_op("getitem", np.array(out), (x,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(str(err)) from err
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record_op("concat", out, tensors, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(str(err)) from err

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record_op("stack", out, tensors, bw)
