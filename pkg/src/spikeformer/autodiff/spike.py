"""The Heaviside spike with its arctan surrogate gradient, and the detach primitive.

Two execution modes exist for the spike:

* training (default): forward is the step function, backward multiplies by
  ``alpha / (2 * (1 + (pi/2 * alpha * x)**2))``;
* surrogate-forward (inside :func:`surrogate_forward`): forward is the smooth
  ``arctan(pi/2 * alpha * x) / pi + 1/2`` itself, so finite differences can
  check the backward rule.

:func:`stop_gradient` can record its forward values and replay them later
(see :func:`freeze_detached`). Gradient checking uses this so that perturbed
forwards treat detached edges as constants, which is exactly what the
backward pass assumes.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .tensor import Tensor, make_result


@dataclass(frozen=True)
class SurrogateConfig:
    alpha: float = 2.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"surrogate slope alpha must be > 0, got {self.alpha}")


_surrogate_forward: contextvars.ContextVar[bool] = contextvars.ContextVar("surrogate_forward", default=False)
_detach_log: contextvars.ContextVar[Optional["_DetachLog"]] = contextvars.ContextVar("detach_log", default=None)


@contextlib.contextmanager
def surrogate_forward(enabled: bool = True) -> Iterator[None]:
    token = _surrogate_forward.set(enabled)
    try:
        yield
    finally:
        _surrogate_forward.reset(token)


def surrogate_forward_enabled() -> bool:
    return _surrogate_forward.get()


def sigma(x: np.ndarray, alpha: float) -> np.ndarray:
    return np.arctan(0.5 * math.pi * alpha * x) / math.pi + 0.5


def sigma_prime(x: np.ndarray, alpha: float) -> np.ndarray:
    return alpha / (2.0 * (1.0 + (0.5 * math.pi * alpha * x) ** 2))


def heaviside(x: np.ndarray) -> np.ndarray:
    return (x > 0).astype(x.dtype)


def surrogate_spike(x: Tensor, cfg: SurrogateConfig = SurrogateConfig()) -> Tensor:
    xd = x.data
    if not np.all(np.isfinite(xd)):
        bad = np.argwhere(~np.isfinite(xd))[0]
        raise ValueError(f"surrogate_spike got a non-finite input at index {tuple(int(i) for i in bad)}")
    alpha = cfg.alpha
    out = sigma(xd, alpha).astype(xd.dtype) if _surrogate_forward.get() else heaviside(xd)
    return make_result(out, (x,), lambda g: (g * sigma_prime(xd, alpha),), "spike")


class _DetachLog:
    def __init__(self, replay: Optional[list[np.ndarray]] = None):
        self.values: list[np.ndarray] = [] if replay is None else replay
        self.replay = replay is not None
        self.cursor = 0

    def take(self, value: np.ndarray) -> np.ndarray:
        if not self.replay:
            self.values.append(value.copy())
            return value
        if self.cursor >= len(self.values):
            raise RuntimeError("replayed function detached more values than the recorded run")
        stored = self.values[self.cursor]
        self.cursor += 1
        if stored.shape != value.shape:
            raise RuntimeError("replayed function detached a value of a different shape")
        return stored


@contextlib.contextmanager
def freeze_detached(recorded: Optional[list[np.ndarray]] = None) -> Iterator[list[np.ndarray]]:
    """Record (``recorded is None``) or replay the outputs of every :func:`stop_gradient`."""
    log = _DetachLog(recorded)
    token = _detach_log.set(log)
    try:
        yield log.values
    finally:
        _detach_log.reset(token)


def detached_value(value: np.ndarray) -> np.ndarray:
    """The value a detached edge carries: ``value`` itself, or its recorded twin during replay."""
    log = _detach_log.get()
    return value if log is None else log.take(value)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; contributes no gradient to ``x``."""
    return Tensor(detached_value(x.data))
