"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

Every value is a :class:`Tensor` holding a ``(rows, cols)`` array. Column
vectors are the default layout, so a mini-batch of ``B`` inputs of width ``d``
is a ``(d, B)`` tensor and layers compute ``W @ x + b``.

Operations are recorded only while a :class:`Tape` is active::

    with Tape() as tape:
        loss = (W @ x).square().sum()
    grads = backward(tape, loss)
    grads[W]            # ndarray with W's shape

Outside a tape nothing is recorded, which is how inference runs.
"""
from __future__ import annotations

import threading

import numpy as np

from .errors import DimensionError, NumericError

_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise DimensionError(f"tensors are 2-D, got an array with {arr.ndim} dimensions")
    return arr


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {where}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


class Tensor:
    """A 2-D float64 array plus the bookkeeping needed to differentiate it.

    Leaves created with ``requires_grad=True`` are the trainable parameters.
    Non-finite values are rejected at construction and after every operation.
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_grad_fn", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = _as_array(data)
        _check_finite(arr, name or "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._grad_fn = None
        self._tape = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar; the functions below do the work
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def square(self):
        return square(self)

    def sum(self):
        return total(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(data: np.ndarray, parents: tuple, grad_fn, where: str) -> Tensor:
    _check_finite(data, where)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._tape = None
    out._parents = ()
    out._grad_fn = None
    tape = _active_tape()
    out.requires_grad = tape is not None and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._grad_fn = grad_fn
        tape._append(out)
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                   "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def grad_fn(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _record(out, (a, b), grad_fn, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _record(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return _record(out, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * x)),), "softplus")


def identity(a) -> Tensor:
    return as_tensor(a)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _record(out, (a,), lambda g: (g / x,), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _record(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def total(a) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    a = as_tensor(a)
    shape = a.shape
    return _record(np.array([[a.data.sum()]]), (a,),
                   lambda g: (np.full(shape, g[0, 0]),), "sum")


ACTIVATIONS = {
    "identity": identity,
    "tanh": tanh,
    "relu": relu,
    "softplus": softplus,
    "sigmoid": sigmoid,
}


class Tape:
    """Ordered record of the operations executed while it is active.

    Nodes are appended in execution order, so the list is already a
    topological order of the computation graph. A tape belongs to one thread.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: Tensor) -> None:
        node._tape = self
        self.nodes.append(node)

    def reset(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._grad_fn = None
            node._tape = None
        self.nodes = []


def backward(tape: Tape, loss: Tensor, reset: bool = True) -> dict:
    """Propagate d(loss)/d(.) back through ``tape``.

    Returns a dict mapping every leaf tensor with ``requires_grad`` reachable
    from ``loss`` to its gradient array. Leaves that do not influence the loss
    are absent; callers treat them as zero. The tape is reset afterwards
    unless ``reset=False``.
    """
    if loss.shape != (1, 1):
        raise DimensionError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and loss._tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    if loss.is_leaf:
        if loss.requires_grad:
            leaves[id(loss)] = loss
        grads[id(loss)] = np.ones((1, 1))
    else:
        grads[id(loss)] = np.ones((1, 1))
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if parent.is_leaf:
                    leaves[key] = parent
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    out = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        out[leaf] = np.zeros(leaf.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
    if reset:
        tape.reset()
    return out
