"""Dense tensors with a reverse-mode tape.

Every forward op computes its value eagerly with numpy and records a closure
that maps the output gradient to the gradients of its inputs. The tape is the
graph of ``Tensor`` objects itself; it is rebuilt on every forward pass.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()
_DEFAULT_DTYPE = [np.float32]


class AutodiffError(Exception):
    """Base class for errors raised by the tensor engine."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, shape_a, shape_b=None, detail: str = ""):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = None if shape_b is None else tuple(shape_b)
        msg = f"{op}: incompatible shapes {self.shape_a}"
        if self.shape_b is not None:
            msg += f" and {self.shape_b}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(AutodiffError, FloatingPointError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: non-finite values encountered")


class GraphError(AutodiffError, RuntimeError):
    pass


def get_default_dtype():
    return _DEFAULT_DTYPE[0]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE[0] = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    old = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A value on the tape.

    ``data`` is an immutable-by-convention numpy array. ``grad`` is filled by
    :func:`backward` for every node with ``requires_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_consumed", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or get_default_dtype(), copy=True)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"
        self._consumed = False
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
        if not np.isfinite(data).all():
            raise NonFiniteError(op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._consumed = False
        out.op = op
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.op = "detach"
        out._consumed = False
        out.name = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar; implementations live in ops.py -------------------
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __pow__(self, exponent):
        return _ops().pow(self, exponent)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __getitem__(self, index):
        return _ops().slice(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        return _ops().transpose(self, axes or None)

    @property
    def T(self):
        return _ops().transpose(self, None)

    def backward(self) -> None:
        backward(self)


def _ops():
    from . import ops

    return ops


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphError("cycle detected in tape")
        state[key] = 1
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad:
                pmark = state.get(id(parent))
                if pmark == 1:
                    raise GraphError("cycle detected in tape")
                if pmark is None:
                    stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` ancestor of a scalar root.

    Leaf gradients accumulate across calls; a root can only be propagated once.
    """
    if root.size != 1 or root.ndim > 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise GraphError("backward already called on this root; rebuild the graph")
    if not root.requires_grad:
        raise GraphError("root does not require grad")
    order = _toposort(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"backward[{node.op}]", pg.shape, parent.shape)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    root._consumed = True


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)
