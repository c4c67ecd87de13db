"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is a recorded-graph design: every differentiable operation
produces a new Tensor holding references to its parent tensors and a
closure that maps the output adjoint to parent adjoint contributions.
``backward`` replays those closures in reverse topological order, so a
scalar loss yields exactly one accumulated gradient per reachable leaf.

Everything is float64 and single-threaded by design: reruns with the same
inputs are bit-identical, which the training harness relies on.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidInputError

# Parameter partition tags: which slice of the model owns a weight.
SHARED = "shared"
GATING = "gating"


def expert_partition(i: int) -> str:
    return f"expert{i}"


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backward().

    ``data`` is row-major; ``grad`` is populated (same shape) by backward
    passes for tensors with ``requires_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward_fn: Callable | None = None,
                 op: str = ""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward_fn = backward_fn
        self.op = op

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # -- graph construction helpers ------------------------------------------

    @staticmethod
    def _lift(value) -> "Tensor":
        if isinstance(value, Tensor):
            return value
        return Tensor(value)

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other)
        return _make(self.data + other.data, (self, other), "add",
                     lambda g: (_unbroadcast(g, self.shape),
                                _unbroadcast(g, other.shape)))

    __radd__ = __add__

    def __neg__(self):
        return _make(-self.data, (self,), "neg", lambda g: (-g,))

    def __sub__(self, other):
        other = Tensor._lift(other)
        return _make(self.data - other.data, (self, other), "sub",
                     lambda g: (_unbroadcast(g, self.shape),
                                _unbroadcast(-g, other.shape)))

    def __rsub__(self, other):
        return Tensor._lift(other).__sub__(self)

    def __mul__(self, other):
        other = Tensor._lift(other)
        return _make(self.data * other.data, (self, other), "mul",
                     lambda g: (_unbroadcast(g * other.data, self.shape),
                                _unbroadcast(g * self.data, other.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        return _make(self.data / other.data, (self, other), "div",
                     lambda g: (_unbroadcast(g / other.data, self.shape),
                                _unbroadcast(-g * self.data / other.data ** 2,
                                             other.shape)))

    def __rtruediv__(self, other):
        return Tensor._lift(other).__truediv__(self)

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise InvalidInputError("tensor exponents are not supported")
        p = float(exponent)
        return _make(self.data ** p, (self,), "pow",
                     lambda g: (g * p * self.data ** (p - 1.0),))

    def __matmul__(self, other):
        other = Tensor._lift(other)

        def bw(g):
            ga = np.matmul(g, np.swapaxes(other.data, -1, -2))
            gb = np.matmul(np.swapaxes(self.data, -1, -2), g)
            return (_unbroadcast_matmul(ga, self.shape),
                    _unbroadcast_matmul(gb, other.shape))

        return _make(np.matmul(self.data, other.data), (self, other),
                     "matmul", bw)

    # -- elementwise functions ---------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return _make(out, (self,), "exp", lambda g: (g * out,))

    def log(self):
        return _make(np.log(self.data), (self,), "log",
                     lambda g: (g / self.data,))

    def tanh(self):
        out = np.tanh(self.data)
        return _make(out, (self,), "tanh", lambda g: (g * (1.0 - out * out),))

    def silu(self):
        sig = 1.0 / (1.0 + np.exp(-self.data))
        return _make(self.data * sig, (self,), "silu",
                     lambda g: (g * sig * (1.0 + self.data * (1.0 - sig)),))

    # -- reductions ----------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is None:
                return (np.broadcast_to(g, self.shape).copy(),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).copy(),)

        return _make(out, (self,), "sum", bw)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for a in axes:
                n *= self.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape manipulation ------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _make(self.data.reshape(shape), (self,), "reshape",
                     lambda g: (g.reshape(old),))

    def transpose(self, axes: Sequence[int]):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        return _make(self.data.transpose(axes), (self,), "transpose",
                     lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(axes)

    def __getitem__(self, key):
        out = self.data[key]

        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, key, g)
            return (full,)

        return _make(out, (self,), "getitem", bw)


class Parameter(Tensor):
    """A named trainable leaf with a partition tag.

    ``partition`` is one of ``shared``, ``gating`` or ``expert{i}`` and
    drives which gradients feed the modulated update. Frozen parameters
    (``trainable=False``) never record into the graph, so they can never
    accumulate gradient.
    """

    __slots__ = ("name", "partition", "trainable")

    def __init__(self, data, name: str, partition: str = SHARED,
                 trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.partition = partition
        self.trainable = trainable

    def __repr__(self) -> str:
        return (f"Parameter({self.name!r}, shape={self.shape}, "
                f"partition={self.partition!r}, trainable={self.trainable})")


def _make(data, parents, op, backward_fn) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents,
                      backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(grad.shape, shape))
                 if ss == 1 and gs != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _unbroadcast_matmul(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Like _unbroadcast but only over the batch dims of a matmul operand."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i in range(max(0, grad.ndim - 2))
                 if shape[i] == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _make(out, tuple(tensors), "concat", bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0)[i] for i in range(len(tensors)))

    return _make(out, tuple(tensors), "stack", bw)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: gather rows of a 2-D table by an integer index array."""
    ids = np.asarray(ids)
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(out, (table,), "take_rows", bw)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor,
             params: Iterable[Parameter] | None = None) -> dict:
    """Reverse pass from a scalar loss.

    Returns a map Parameter -> gradient array covering every trainable
    parameter reached from ``loss``; when ``params`` is given, parameters
    not reachable from the loss map to zeros. Each Parameter's ``grad``
    buffer is also set (not accumulated across calls).
    """
    if loss.ndim != 0:
        raise InvalidInputError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not math.isfinite(float(loss.data)):
        raise InvalidInputError("backward needs a finite loss")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones((), dtype=np.float64)
    grads: dict = {}
    for node in reversed(order):
        if node.grad is None or node._backward_fn is None:
            if isinstance(node, Parameter) and node.grad is not None:
                grads[node] = node.grad
            continue
        contribs = node._backward_fn(node.grad)
        for parent, contrib in zip(node._parents, contribs):
            if not parent.requires_grad or contrib is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad = parent.grad + contrib
        if isinstance(node, Parameter):
            grads[node] = node.grad
    if params is not None:
        for p in params:
            if p.trainable and p not in grads:
                grads[p] = np.zeros_like(p.data)
                p.grad = grads[p]
    return grads


def finite_diff_gradient(loss_fn: Callable[[], Tensor],
                         params: Sequence[Parameter],
                         h: float = 1e-5,
                         max_coords: int | None = None) -> dict:
    """Central-difference gradient oracle: (f(x+h) - f(x-h)) / 2h per coordinate.

    ``max_coords`` caps the checked coordinates per parameter (evenly spaced,
    deterministic); the remaining entries are left as NaN so callers can mask.
    """
    grads = {}
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords is None or max_coords >= n:
            coords = np.arange(n)
            est = np.zeros(n)
        else:
            coords = np.unique(np.linspace(0, n - 1, max_coords).astype(int))
            est = np.full(n, np.nan)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            est[i] = (up - down) / (2.0 * h)
        grads[p] = est.reshape(p.shape)
    return grads


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None
