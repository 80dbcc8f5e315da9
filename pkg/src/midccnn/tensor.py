"""Float64 tensors with a recorded operation tape for reverse-mode differentiation.

Every differentiable operation is a :class:`Function` subclass. Applying one
creates a tape node carrying the op kind, the input tensors, the id of the
produced tensor and whatever the backward rule needs. Node ids come from a
global monotonic counter, so sorting reachable nodes by id yields a valid
topological order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Iterator, Optional, Sequence

import numpy as np

_node_ids = itertools.count()
_grad_enabled = True
_debug = False
_branch_log: Optional[list] = None


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised when backward is called on something it cannot differentiate."""


def set_debug(flag: bool) -> None:
    """Check every forward output for NaN/Inf when enabled."""
    global _debug
    _debug = bool(flag)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def record_branches() -> Iterator[list]:
    """Collect the branch decisions (relu masks, max selections) of forwards run inside."""
    global _branch_log
    prev = _branch_log
    _branch_log = []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def log_branch(decision: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(decision)


class Tensor:
    """Dense float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Function] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.full((), x))


class Function:
    """One recorded operation: forward on arrays, backward to per-input grads."""

    kind = "function"

    def __init__(self, inputs: Sequence[Tensor]):
        self.inputs = tuple(inputs)
        self.needs_grad = tuple(t.requires_grad for t in self.inputs)
        self.id = -1

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(t.node.id if t.node is not None else -1 for t in self.inputs)

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs) -> Tensor:
        fn = cls(tensors)
        out = Tensor.__new__(Tensor)
        out.data = fn.forward(*(t.data for t in tensors), **kwargs)
        out.grad = None
        out.name = None
        if _debug and not np.all(np.isfinite(out.data)):
            if all(np.all(np.isfinite(t.data)) for t in tensors):
                raise FloatingPointError(f"{cls.kind} produced non-finite values from finite inputs")
        track = _grad_enabled and any(t.requires_grad for t in tensors)
        out.requires_grad = track
        if track:
            fn.id = next(_node_ids)
            out.node = fn
        else:
            out.node = None
        return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise GraphError("loss is not on the tape (no recorded operation produced it)")

    nodes: dict[int, Function] = {}
    stack = [loss.node]
    while stack:
        fn = stack.pop()
        if fn.id in nodes:
            continue
        nodes[fn.id] = fn
        for t in fn.inputs:
            if t.node is not None and t.node.id not in nodes:
                stack.append(t.node)

    grads: dict[int, np.ndarray] = {loss.node.id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        fn = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        in_grads = fn.backward(g)
        for t, gi in zip(fn.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.node is not None:
                prev = grads.get(t.node.id)
                grads[t.node.id] = gi if prev is None else prev + gi
            else:
                t.grad = gi.copy() if t.grad is None else t.grad + gi


# ---------------------------------------------------------------- elementwise


def _channel_axis(ndim: int) -> int:
    return 0 if ndim == 1 else 1


def _check_binary(a: np.ndarray, b: np.ndarray, kind: str) -> None:
    if a.shape == b.shape or b.ndim == 0:
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[_channel_axis(a.ndim)] == b.shape[0]:
        return
    raise ShapeError(f"{kind}: cannot combine shapes {a.shape} and {b.shape}")


def _expand_b(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if b.ndim == 1 and a.shape != b.shape:
        shape = [1] * a.ndim
        shape[_channel_axis(a.ndim)] = b.shape[0]
        return b.reshape(shape)
    return b


def _reduce_b(g: np.ndarray, b_shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == b_shape:
        return g
    if len(b_shape) == 0:
        return np.asarray(g.sum())
    axis = _channel_axis(g.ndim)
    return g.sum(axis=tuple(i for i in range(g.ndim) if i != axis))


class Add(Function):
    kind = "add"

    def forward(self, a, b):
        _check_binary(a, b, self.kind)
        self.b_shape = b.shape
        return a + _expand_b(a, b)

    def backward(self, g):
        return g, _reduce_b(g, self.b_shape)


class Sub(Function):
    kind = "sub"

    def forward(self, a, b):
        _check_binary(a, b, self.kind)
        self.b_shape = b.shape
        return a - _expand_b(a, b)

    def backward(self, g):
        return g, -_reduce_b(g, self.b_shape)


class Mul(Function):
    kind = "mul"

    def forward(self, a, b):
        _check_binary(a, b, self.kind)
        self.a, self.b = a, _expand_b(a, b)
        self.b_shape = b.shape
        return a * self.b

    def backward(self, g):
        return g * self.b, _reduce_b(g * self.a, self.b_shape)


class Div(Function):
    kind = "div"

    def forward(self, a, b):
        _check_binary(a, b, self.kind)
        self.b = _expand_b(a, b)
        self.b_shape = b.shape
        self.out = a / self.b
        return self.out

    def backward(self, g):
        ga = g / self.b
        return ga, _reduce_b(-ga * self.out, self.b_shape)


class Scale(Function):
    kind = "scale"

    def forward(self, a, factor: float = 1.0):
        self.factor = factor
        return a * factor

    def backward(self, g):
        return (g * self.factor,)


class Relu(Function):
    kind = "relu"

    def forward(self, a):
        self.mask = a > 0
        log_branch(self.mask)
        return np.where(self.mask, a, 0.0)

    def backward(self, g):
        return (g * self.mask,)


class Tanh(Function):
    kind = "tanh"

    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, g):
        return (g * (1.0 - self.out * self.out),)


class Exp(Function):
    kind = "exp"

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    kind = "log"

    def forward(self, a, clamp: Optional[float] = None):
        if clamp is None:
            if np.any(a <= 0):
                raise ValueError("log of non-positive value (strict mode)")
            self.x = a
            self.live = None
            return np.log(a)
        self.live = a > clamp
        self.x = np.where(self.live, a, clamp)
        return np.log(self.x)

    def backward(self, g):
        gx = g / self.x
        if self.live is not None:
            gx = gx * self.live
        return (gx,)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    return Div.apply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=float(factor))


def relu(a: Tensor) -> Tensor:
    return Relu.apply(a)


def tanh(a: Tensor) -> Tensor:
    return Tanh.apply(a)


def exp(a: Tensor) -> Tensor:
    return Exp.apply(a)


def log(a: Tensor, clamp: Optional[float] = None) -> Tensor:
    """Natural log. ``clamp=None`` is strict; otherwise inputs are floored at ``clamp``."""
    return Log.apply(a, clamp=clamp)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "relu": relu, "tanh": tanh, "exp": exp, "log": log,
}


def elementwise(op_kind: str, a: Tensor, b: Optional[Tensor] = None, factor: float = 1.0) -> Tensor:
    if op_kind == "scale":
        return scale(a, factor)
    fn = _ELEMENTWISE[op_kind]
    if op_kind in ("add", "sub", "mul", "div"):
        if b is None:
            raise ShapeError(f"{op_kind} needs two operands")
        return fn(a, b)
    return fn(a)


# ------------------------------------------------------------------- linear


class MatMul(Function):
    kind = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        return g @ self.b.T, self.a.T @ g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


# --------------------------------------------------------------- reductions


class Sum(Function):
    kind = "sum"

    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.shape).copy(),)


class Mean(Function):
    kind = "mean"

    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        if axis is None:
            self.count = a.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            self.count = int(np.prod([a.shape[i] for i in axes]))
        return np.asarray(a.mean(axis=axis, keepdims=keepdims))

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g / self.count, self.shape).copy(),)


class Max(Function):
    """Max along one axis; ties route the gradient to the lowest index."""

    kind = "max"

    def forward(self, a, axis: int = -1):
        axis = axis % a.ndim
        self.axis, self.shape = axis, a.shape
        self.idx = np.argmax(a, axis=axis)
        log_branch(self.idx)
        return np.take_along_axis(a, np.expand_dims(self.idx, axis), axis).squeeze(axis)

    def backward(self, g):
        out = np.zeros(self.shape)
        np.put_along_axis(out, np.expand_dims(self.idx, self.axis), np.expand_dims(g, self.axis), self.axis)
        return (out,)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def max(a: Tensor, axis: int = -1) -> Tensor:  # noqa: A001
    return Max.apply(a, axis=axis)


class Softmax(Function):
    kind = "softmax"

    def forward(self, a, axis: int = -1):
        if a.ndim == 0 or not -a.ndim <= axis < a.ndim:
            raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
        if a.shape[axis] == 0:
            raise ShapeError("softmax over an empty axis")
        self.axis = axis
        z = np.exp(a - a.max(axis=axis, keepdims=True))
        self.out = z / z.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, g):
        y = self.out
        return (y * (g - (g * y).sum(axis=self.axis, keepdims=True)),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


# ------------------------------------------------------------ shape plumbing


class Reshape(Function):
    kind = "reshape"

    def forward(self, a, shape=()):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.shape),)


class Transpose(Function):
    kind = "transpose"

    def forward(self, a, axes=()):
        self.inv = np.argsort(axes)
        return np.ascontiguousarray(a.transpose(axes))

    def backward(self, g):
        return (g.transpose(self.inv),)


class BroadcastTo(Function):
    """Explicit expansion of size-1 axes; the only general broadcasting path."""

    kind = "broadcast_to"

    def forward(self, a, shape=()):
        if a.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
            raise ShapeError(f"broadcast_to: cannot expand {a.shape} to {tuple(shape)}")
        self.axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
        return np.broadcast_to(a, shape).copy()

    def backward(self, g):
        return (g.sum(axis=self.axes, keepdims=True),)


class Gather(Function):
    """Pick ``a[i, index[i]]`` for a rank-2 ``a``."""

    kind = "gather"

    def forward(self, a, index=None):
        if a.ndim != 2 or len(index) != a.shape[0]:
            raise ShapeError(f"gather: shape {a.shape} with {len(index)} indices")
        self.shape = a.shape
        self.index = np.asarray(index, dtype=np.int64)
        return a[np.arange(a.shape[0]), self.index]

    def backward(self, g):
        out = np.zeros(self.shape)
        out[np.arange(self.shape[0]), self.index] = g
        return (out,)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    return Transpose.apply(a, axes=tuple(axes))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    return BroadcastTo.apply(a, shape=tuple(shape))


def gather(a: Tensor, index: Sequence[int]) -> Tensor:
    return Gather.apply(a, index=index)


class ConcatChannels(Function):
    kind = "concat_channels"

    def forward(self, *arrays):
        if not arrays:
            raise ShapeError("concat_channels needs at least one tensor")
        ref = arrays[0].shape
        for a in arrays:
            if a.ndim != 4 or a.shape[0] != ref[0] or a.shape[2:] != ref[2:]:
                raise ShapeError(
                    "concat_channels: batch/spatial mismatch among shapes "
                    + ", ".join(str(x.shape) for x in arrays)
                )
        self.offsets = np.cumsum([0] + [a.shape[1] for a in arrays])
        return np.concatenate(arrays, axis=1)

    def backward(self, g):
        o = self.offsets
        return tuple(g[:, o[i]:o[i + 1]] for i in range(len(o) - 1))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return ConcatChannels.apply(*tensors)


def channel_offsets(tensors: Sequence[Tensor]) -> list[int]:
    """Start offset of each input inside a ``concat_channels`` result."""
    return [int(v) for v in np.cumsum([0] + [t.shape[1] for t in tensors])[:-1]]
