"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Every differentiable op appends its output node to a module-level tape in
creation order, so walking the tape backwards is a valid topological order.
Training loops call :func:`reset_graph` once per step.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ContractError(ValueError):
    """An operation received inputs that violate its contract."""


class EmptyGraphError(RuntimeError):
    """backward() was called on a value with no recorded computation."""


class NonFiniteError(FloatingPointError):
    """Debug mode found NaN/Inf in a forward value or gradient."""


class _State(threading.local):
    def __init__(self):
        self.tape: list[Tensor] = []
        self.grad_enabled = True
        self.debug = False


_state = _State()


def reset_graph() -> None:
    _state.tape.clear()


def tape_size() -> int:
    return len(_state.tape)


def set_debug(flag: bool) -> None:
    """Check every forward value and gradient for NaN/Inf when ``flag`` is set."""
    _state.debug = bool(flag)


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

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
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Operator sugar; implementations live in ops.py.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A named trainable leaf. ``trainable`` toggles gradient tracking."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(np.array(data, dtype=DTYPE, copy=True), requires_grad=trainable)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap an op result, recording it on the tape when any parent needs gradients."""
    out = Tensor(data)
    out.op = op
    if _state.debug and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"non-finite forward value produced by {op}")
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        _state.tape.append(out)
    return out


def backward(loss: Tensor, params: Mapping[str, Parameter] | Iterable[Parameter] | None = None
             ) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Returns a map from parameter name to gradient. When ``params`` is given,
    every listed parameter appears in the map and those off the recorded path
    get zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss.backward_fn is None:
        raise EmptyGraphError("loss has no recorded computation (is it a leaf or built under no_grad?)")
    tape = _state.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    # Nodes created after the loss cannot be upstream of it.
    try:
        start = len(tape) - 1 - tape[::-1].index(loss)
    except ValueError:
        raise EmptyGraphError("loss is not on the current tape; was reset_graph() called?") from None
    reached: dict[int, Tensor] = {}
    for i in range(start, -1, -1):
        node = tape[i]
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if _state.debug and not np.all(np.isfinite(pg)):
                raise NonFiniteError(f"non-finite gradient flowing out of {node.op}")
            if p.backward_fn is None:
                p.grad = np.array(pg, dtype=DTYPE, copy=True) if p.grad is None else p.grad + pg
                reached[id(p)] = p
            else:
                key = id(p)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
    out: dict[str, np.ndarray] = {}
    if params is None:
        for p in reached.values():
            if isinstance(p, Parameter):
                out[p.name] = p.grad
        return out
    items = params.items() if isinstance(params, Mapping) else ((p.name, p) for p in params)
    for name, p in items:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        out[name] = p.grad
    return out
