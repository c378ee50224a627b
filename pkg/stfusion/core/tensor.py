"""
Dense NCHW tensors with reverse-mode automatic differentiation.

Every differentiable operation is a `Function` subclass with a numpy forward and a
backward returning one gradient per input. Broadcasting is limited to scalar <-> tensor
and equal shapes; anything else goes through an explicit `broadcast_to`.
"""
from __future__ import annotations

import contextlib
from typing import Iterator, Sequence

import numpy as np
from loguru import logger

from stfusion.core.entities import ContractError, DimensionError, DomainError, NumericError
from stfusion.utils.config.server import DEBUG

_state = {
    "dtype": np.dtype(np.float32),
    "grad_enabled": True,
    "debug": DEBUG,
}


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"Unsupported dtype {dtype}, expected float32 or float64")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    previous = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


@contextlib.contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    previous = _state["debug"]
    _state["debug"] = enabled
    try:
        yield
    finally:
        _state["debug"] = previous


class Function:
    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    @property
    def name(self) -> str:
        return type(self).__name__

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError(f"{self.name} has no forward")

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError(f"{self.name} has no backward")

    @classmethod
    def apply(cls, *inputs, **kwargs) -> "Tensor":
        tensors = tuple(as_tensor(t) for t in inputs)
        fn = cls(*tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        if _state["debug"] and not np.all(np.isfinite(out)):
            logger.error(f"{fn.name} produced non-finite values")
            raise NumericError(f"{fn.name} produced non-finite values", source=fn.name)
        requires_grad = _state["grad_enabled"] and any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=requires_grad, creator=fn if requires_grad else None)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, creator: Function | None = None):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(get_default_dtype())
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.creator = creator

    @property
    def grad_enabled(self) -> bool:
        return self.requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    __hash__ = object.__hash__

    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, other):
        return Pow.apply(self, other)

    def __getitem__(self, key):
        return Slice.apply(self, key=key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else int(np.prod([self.shape[a] for a in _axes(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int, keepdims: bool = False) -> "Tensor":
        return Max.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def permute(self, *axes) -> "Tensor":
        return Permute.apply(self, axes=axes)

    def flip(self, axis: int) -> "Tensor":
        return Flip.apply(self, axis=axis)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def abs(self) -> "Tensor":
        return Abs.apply(self)

    def sigmoid(self) -> "Tensor":
        return Sigmoid.apply(self)

    def relu(self) -> "Tensor":
        return Relu.apply(self)

    def silu(self) -> "Tensor":
        return Silu.apply(self)

    def softplus(self) -> "Tensor":
        return Softplus.apply(self)

    def clip(self, low: float, high: float) -> "Tensor":
        return Clip.apply(self, low=low, high=high)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=get_default_dtype()))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=get_default_dtype()), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=get_default_dtype()), requires_grad=requires_grad)


def _axes(axis) -> tuple[int, ...]:
    return (axis,) if isinstance(axis, int) else tuple(axis)


class Tape:
    """Operations reachable from an output, in topological order (inputs before outputs)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in reversed(node.creator.inputs):
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    def backward(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node.creator is None:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            input_grads = node.creator.backward(grad)
            for parent, parent_grad in zip(node.creator.inputs, input_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = np.asarray(parent_grad, dtype=parent.dtype).reshape(parent.shape)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + parent_grad
                else:
                    grads[id(parent)] = parent_grad


def backward(loss: Tensor) -> None:
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with gradients enabled")
    Tape.record(loss).backward(np.ones_like(loss.data))


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if b.size == 1 and b.ndim <= a.ndim:
        return a.shape
    if a.size == 1 and a.ndim <= b.ndim:
        return b.shape
    raise DimensionError(f"Shapes {a.shape} and {b.shape} are not broadcast-compatible")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


class BinaryFunction(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.a, self.b = a, b
        return self.compute(a, b)

    def compute(self, a, b):
        raise NotImplementedError

    def partials(self, grad):
        raise NotImplementedError

    def backward(self, grad):
        ga, gb = self.partials(grad)
        return (
            None if ga is None else _reduce_to(ga, self.a.shape),
            None if gb is None else _reduce_to(gb, self.b.shape),
        )


class Add(BinaryFunction):
    def compute(self, a, b):
        return a + b

    def partials(self, grad):
        return grad, grad


class Sub(BinaryFunction):
    def compute(self, a, b):
        return a - b

    def partials(self, grad):
        return grad, -grad


class Mul(BinaryFunction):
    def compute(self, a, b):
        return a * b

    def partials(self, grad):
        return grad * self.b, grad * self.a


class Div(BinaryFunction):
    def compute(self, a, b):
        if _state["debug"] and np.any(b == 0):
            raise DomainError("division by zero")
        return a / b

    def partials(self, grad):
        return grad / self.b, -grad * self.a / (self.b * self.b)


class Pow(BinaryFunction):
    def compute(self, a, b):
        if _state["debug"] and np.any((a < 0) & (np.asarray(b) != np.round(b))):
            raise DomainError("fractional power of a negative base")
        self.out = np.power(a, b)
        return self.out

    def partials(self, grad):
        ga = grad * self.b * np.power(self.a, self.b - 1)
        gb = None
        if self.inputs[1].requires_grad:
            gb = grad * self.out * np.log(np.where(self.a > 0, self.a, 1.0))
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Abs(Function):
    def forward(self, a):
        # subgradient 0 at exactly zero
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, grad):
        return (grad * self.sign,)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        if _state["debug"] and np.any(a <= 0):
            raise DomainError("log of a non-positive value")
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    positive = a >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-a[positive]))
    exp_a = np.exp(a[~positive])
    out[~positive] = exp_a / (1.0 + exp_a)
    return out


class Sigmoid(Function):
    def forward(self, a):
        self.out = _sigmoid(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0).astype(a.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class Silu(Function):
    def forward(self, a):
        self.a = a
        self.s = _sigmoid(a)
        return a * self.s

    def backward(self, grad):
        return (grad * self.s * (1.0 + self.a * (1.0 - self.s)),)


class Softplus(Function):
    def forward(self, a):
        self.a = a
        return np.logaddexp(0.0, a).astype(a.dtype)

    def backward(self, grad):
        return (grad * _sigmoid(self.a),)


class Clip(Function):
    def forward(self, a, low: float, high: float):
        self.mask = (a >= low) & (a <= high)
        return np.clip(a, low, high)

    def backward(self, grad):
        return (grad * self.mask,)


UNARY_OPS = {
    "abs": Abs,
    "exp": Exp,
    "log": Log,
    "sigmoid": Sigmoid,
    "relu": Relu,
    "silu": Silu,
    "neg": Neg,
    "softplus": Softplus,
}
BINARY_OPS = {"add": Add, "sub": Sub, "mul": Mul, "div": Div, "pow": Pow}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    if op_kind in UNARY_OPS:
        if b is not None:
            raise ContractError(f"{op_kind} takes a single operand")
        return UNARY_OPS[op_kind].apply(a)
    if op_kind in BINARY_OPS:
        if b is None:
            raise ContractError(f"{op_kind} needs two operands")
        return BINARY_OPS[op_kind].apply(a, b)
    raise ContractError(f"Unknown elementwise op {op_kind!r}")


class Sum(Function):
    def forward(self, a, axis=None, keepdims: bool = False):
        self.shape = a.shape
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, _axes(self.axis))
        return (np.broadcast_to(grad, self.shape),)


class Max(Function):
    """Max over one axis; the gradient goes to the first maximal element."""

    def forward(self, a, axis: int, keepdims: bool = False):
        if a.shape[axis] == 0:
            raise DimensionError("max over an empty axis")
        self.shape = a.shape
        self.axis = axis % a.ndim
        self.index = np.expand_dims(np.argmax(a, axis=self.axis), self.axis)
        out = np.take_along_axis(a, self.index, axis=self.axis)
        return out if keepdims else np.squeeze(out, axis=self.axis)

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=grad.dtype)
        grad = grad.reshape(self.index.shape)
        np.put_along_axis(full, self.index, grad, axis=self.axis)
        return (full,)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as e:
            raise DimensionError(str(e))

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Permute(Function):
    def forward(self, a, axes):
        if sorted(axes) != list(range(a.ndim)):
            raise DimensionError(f"{axes} is not a permutation of {a.ndim} axes")
        self.inverse = np.argsort(axes)
        return np.transpose(a, axes)

    def backward(self, grad):
        return (np.transpose(grad, self.inverse),)


class Flip(Function):
    def forward(self, a, axis: int):
        self.axis = axis
        return np.flip(a, axis=axis).copy()

    def backward(self, grad):
        return (np.flip(grad, axis=self.axis),)


class Slice(Function):
    def forward(self, a, key):
        self.shape = a.shape
        self.key = key
        return np.array(a[key])

    def backward(self, grad):
        full = np.zeros(self.shape, dtype=grad.dtype)
        full[self.key] = grad
        return (full,)


class BroadcastTo(Function):
    def forward(self, a, shape):
        if a.ndim != len(shape):
            raise DimensionError(f"broadcast_to keeps rank: {a.shape} -> {shape}")
        self.axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
        if any(a.shape[i] != 1 for i in self.axes):
            raise DimensionError(f"Cannot broadcast {a.shape} to {shape}")
        return np.broadcast_to(a, shape).copy()

    def backward(self, grad):
        return (grad.sum(axis=self.axes, keepdims=True),)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    if tuple(a.shape) == tuple(shape):
        return a
    return BroadcastTo.apply(a, shape=tuple(shape))


class Gather(Function):
    """Take entries of a 1-D tensor at integer positions."""

    def forward(self, a, index: np.ndarray):
        if a.ndim != 1:
            raise DimensionError(f"gather expects a 1-D tensor, got {a.shape}")
        self.size = a.shape[0]
        self.index = index
        return a[index]

    def backward(self, grad):
        full = np.zeros(self.size, dtype=grad.dtype)
        np.add.at(full, self.index, grad)
        return (full,)


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    return Gather.apply(a, index=np.asarray(index, dtype=np.int64))


class Concat(Function):
    def forward(self, *arrays, axis: int):
        first = arrays[0]
        axis = axis % first.ndim
        for other in arrays[1:]:
            if other.ndim != first.ndim or any(
                s != t for i, (s, t) in enumerate(zip(first.shape, other.shape)) if i != axis
            ):
                raise DimensionError(f"Cannot concatenate {first.shape} and {other.shape} on axis {axis}")
        self.axis = axis
        self.bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.bounds, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    return Concat.apply(*tensors, axis=axis)


class Interleave(Function):
    """Index 2k of the output axis comes from a[k], index 2k+1 from b[k]."""

    def forward(self, a, b, axis: int):
        if a.shape != b.shape:
            raise DimensionError(f"interleave needs equal shapes, got {a.shape} and {b.shape}")
        self.axis = axis % a.ndim
        shape = list(a.shape)
        shape[self.axis] *= 2
        return np.stack([a, b], axis=self.axis + 1).reshape(shape)

    def backward(self, grad):
        return _split_interleaved(grad, self.axis)


def _split_interleaved(y: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    index_even = [slice(None)] * y.ndim
    index_odd = [slice(None)] * y.ndim
    index_even[axis] = slice(0, None, 2)
    index_odd[axis] = slice(1, None, 2)
    return y[tuple(index_even)], y[tuple(index_odd)]


def interleave(a: Tensor, b: Tensor, axis: int) -> Tensor:
    return Interleave.apply(a, b, axis=axis)


def deinterleave(y: Tensor, axis: int) -> tuple[Tensor, Tensor]:
    axis = axis % y.ndim
    if y.shape[axis] % 2:
        raise DimensionError(f"Axis {axis} of {y.shape} has odd extent")
    index_even = [slice(None)] * y.ndim
    index_odd = [slice(None)] * y.ndim
    index_even[axis] = slice(0, None, 2)
    index_odd[axis] = slice(1, None, 2)
    return y[tuple(index_even)], y[tuple(index_odd)]


def split_halves(y: Tensor, axis: int) -> tuple[Tensor, Tensor]:
    axis = axis % y.ndim
    extent = y.shape[axis]
    if extent % 2:
        raise DimensionError(f"Axis {axis} of {y.shape} has odd extent")
    first = [slice(None)] * y.ndim
    second = [slice(None)] * y.ndim
    first[axis] = slice(0, extent // 2)
    second[axis] = slice(extent // 2, None)
    return y[tuple(first)], y[tuple(second)]
