"""Primitive differentiable operations."""

from __future__ import annotations

import builtins
import contextlib
import contextvars
from typing import Iterator, Optional, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, make_result

_mac_counter: contextvars.ContextVar[Optional[list]] = contextvars.ContextVar("mac_counter", default=None)


@contextlib.contextmanager
def count_macs() -> Iterator[list]:
    """Count multiply-accumulates performed by :func:`matmul` inside the block.

    Yields a one-element list whose entry is the running count.
    """
    box = [0]
    token = _mac_counter.set(box)
    try:
        yield box
    finally:
        _mac_counter.reset(token)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_result(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return make_result(ad ** exponent, (a,),
                       lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,),
                       lambda g: (g * mask,), "relu")


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    out = np.logaddexp(0.0, ad).astype(a.dtype, copy=False)
    sig = 1.0 / (1.0 + np.exp(-ad))
    return make_result(out, (a,), lambda g: (g * sig,), "softplus")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (numpy ``@`` semantics, ndim >= 2)."""
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2, got shapes {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {ad.shape} @ {bd.shape}")
    out = ad @ bd
    box = _mac_counter.get()
    if box is not None:
        box[0] += int(np.prod(out.shape, dtype=np.int64)) * ad.shape[-1]

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "matmul")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_result(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,),
                       lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_result(a.data[index], (a,), bw, "getitem")


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return builtins.any(isinstance(i, (list, np.ndarray)) for i in items)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(out, tensors, bw, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_result(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def where_const(mask: np.ndarray, a: Tensor, fill: float) -> Tensor:
    """``a`` where ``mask`` holds, else the constant ``fill``."""
    out = np.where(mask, a.data, fill).astype(a.dtype, copy=False)
    return make_result(out, (a,), lambda g: (g * mask,), "where")
