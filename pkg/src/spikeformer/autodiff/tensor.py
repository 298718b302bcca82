"""Dense tensors with a reverse-mode differentiation tape."""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


@dataclass(eq=False)
class Node:
    """One recorded operation: its inputs and the rule mapping the output grad to input grads."""

    op: str
    parents: tuple["Tensor", ...]
    backward: BackwardFn


class Tensor:
    """An n-dimensional float array that can take part in the differentiation tape.

    ``data`` is a numpy array (row-major). ``grad`` is filled by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    # -- basic properties --------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_node(self) -> Optional[Node]:
        return self._node

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operator sugar; the implementations live in ops ---------------------
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

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def backward(self, grad=None, retain_grads: bool = True) -> None:
        backward(self, grad, retain_grads=retain_grads)


class Parameter(Tensor):
    """A learnable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op result, recording a tape node when any parent needs a gradient."""
    out = Tensor(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, tuple(parents), backward_fn)
    return out


@dataclass
class Tape:
    """Topologically ordered op records reachable from one output."""

    nodes: list[tuple[Tensor, Node]] = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: list[tuple[Tensor, Node]] = []
        seen: set[int] = set()
        # iterative post-order DFS; recursion would overflow on long unrolls
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if t._node is None:
                continue
            if expanded:
                order.append((t, t._node))
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._node.parents:
                if p._node is not None and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(output: Tensor, grad=None, retain_grads: bool = True) -> Tape:
    """Run reverse-mode differentiation from ``output``.

    Leaf tensors with ``requires_grad`` accumulate into ``.grad``. With
    ``retain_grads`` the intermediate tensors keep their grads too.
    """
    if not output.requires_grad:
        raise RuntimeError("backward() called on a tensor that does not require grad")
    if grad is None:
        if output.size != 1:
            raise RuntimeError(f"grad must be given for non-scalar output of shape {output.shape}")
        seed = np.ones_like(output.data)
    else:
        seed = np.asarray(grad.data if isinstance(grad, Tensor) else grad, dtype=output.dtype)
        if seed.shape != output.shape:
            raise ValueError(f"grad shape {seed.shape} does not match output shape {output.shape}")

    tape = Tape.from_output(output)
    grads: dict[int, np.ndarray] = {id(output): seed}

    def accumulate(t: Tensor, g: np.ndarray) -> None:
        if t._node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            return
        prev = grads.get(id(t))
        grads[id(t)] = g if prev is None else prev + g

    if output._node is None:
        accumulate(output, seed)
        return tape

    for t, node in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        # broadcast views (zero strides) push matmul off the BLAS path
        g = np.ascontiguousarray(g)
        if retain_grads:
            t.grad = g
        parent_grads = node.backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            accumulate(p, pg)
    return tape
