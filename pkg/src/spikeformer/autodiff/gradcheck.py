"""Central finite-difference checks of the analytic backward pass."""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from .spike import freeze_detached, surrogate_forward
from .tensor import Tensor, no_grad


class NonDeterministicError(RuntimeError):
    pass


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got output shape {out.shape}")
    return float(out.data.reshape(()))


def grad_check(f: Callable[..., Tensor], point: Union[Tensor, Sequence[Tensor]], eps: float = 1e-6,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Largest ``|analytic - numeric| / max(1, |analytic|)`` over the checked coordinates.

    ``f`` is called as ``f(*tensors)``. The tensors are perturbed in place and
    restored afterwards (values and ``.grad``), so ``f`` may also close over
    them (model parameters).
    Spikes run in surrogate-forward mode, and every detached value is frozen at
    its unperturbed forward value while differencing. ``max_coords`` limits the
    number of coordinates checked per tensor (sampled with ``seed``).
    """
    tensors = [point] if isinstance(point, Tensor) else list(point)
    saved_flags = [t.requires_grad for t in tensors]
    saved_grads = [t.grad for t in tensors]
    rng = np.random.default_rng(seed)
    try:
        for t in tensors:
            t.requires_grad = True
            t.grad = None
        with surrogate_forward():
            with freeze_detached() as recorded:
                out = f(*tensors)
            base = _scalar(out)
            with no_grad(), freeze_detached():
                again = _scalar(f(*tensors))
            if again != base:
                raise NonDeterministicError(f"f is not deterministic at the point: {base!r} vs {again!r}")
            out.backward()
            analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

            worst = 0.0
            for t, ga in zip(tensors, analytic):
                flat = t.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    idx = rng.choice(flat.size, size=max_coords, replace=False)
                gflat = ga.reshape(-1)
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + eps
                    with no_grad(), freeze_detached(recorded):
                        fp = _scalar(f(*tensors))
                    flat[i] = orig - eps
                    with no_grad(), freeze_detached(recorded):
                        fm = _scalar(f(*tensors))
                    flat[i] = orig
                    numeric = (fp - fm) / (2 * eps)
                    err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
                    worst = max(worst, err)
            return worst
    finally:
        for t, flag, grad in zip(tensors, saved_flags, saved_grads):
            t.requires_grad = flag
            t.grad = grad
