"""Leaky integrate-and-fire neurons (LIF, PLIF, LIAF, PLIAF) unrolled over time steps.

Per step, with membrane potential ``V`` carried between steps::

    H = V + (x - (V - v_reset)) / tau
    S = spike(H - v_th)
    V = H * (1 - detach(S)) + v_reset * detach(S)

Spiking modes emit ``S``; analog modes emit ``relu(H)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .autodiff import ops
from .autodiff.module import Module
from .autodiff.spike import (SurrogateConfig, detached_value, heaviside, sigma, sigma_prime, stop_gradient,
                             surrogate_forward_enabled, surrogate_spike)
from .autodiff.tensor import Parameter, Tensor, make_result


class NeuronMode(str, enum.Enum):
    LIF = "LIF"
    PLIF = "PLIF"
    LIAF = "LIAF"
    PLIAF = "PLIAF"

    @property
    def learnable_tau(self) -> bool:
        return self in (NeuronMode.PLIF, NeuronMode.PLIAF)

    @property
    def analog(self) -> bool:
        return self in (NeuronMode.LIAF, NeuronMode.PLIAF)


@dataclass(frozen=True)
class NeuronConfig:
    mode: NeuronMode = NeuronMode.PLIF
    tau: float = 2.0
    v_th: float = 1.0
    v_reset: float = 0.0
    alpha: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "mode", NeuronMode(self.mode))
        if not self.tau > 1:
            raise ValueError(f"membrane time constant must exceed 1, got {self.tau}")
        if not self.v_th > self.v_reset:
            raise ValueError(f"v_th ({self.v_th}) must exceed v_reset ({self.v_reset})")

    @property
    def surrogate(self) -> SurrogateConfig:
        return SurrogateConfig(self.alpha)


@dataclass
class NeuronState:
    V: Tensor


def tau_param_for(tau: float) -> float:
    """Inverse of ``tau = 1 + softplus(p)``."""
    return math.log(math.expm1(tau - 1.0))


def effective_tau(cfg: NeuronConfig, tau_param: Union[None, float, Tensor] = None) -> float:
    if not cfg.mode.learnable_tau:
        return float(cfg.tau)
    if tau_param is None:
        tau_param = tau_param_for(cfg.tau)
    p = float(np.asarray(tau_param.data if isinstance(tau_param, Tensor) else tau_param).reshape(()))
    return 1.0 + float(np.logaddexp(0.0, p))


def _inverse_tau(cfg: NeuronConfig, tau_param: Optional[Tensor]):
    if cfg.mode.learnable_tau and tau_param is not None:
        return 1.0 / (ops.softplus(tau_param) + 1.0)
    return 1.0 / effective_tau(cfg)


def initial_state(shape, cfg: NeuronConfig, dtype=np.float64) -> NeuronState:
    return NeuronState(Tensor(np.full(shape, cfg.v_reset, dtype=dtype)))


def neuron_step(state: NeuronState, x_t: Tensor, cfg: NeuronConfig,
                tau_param: Optional[Tensor] = None, inv_tau=None) -> tuple[Tensor, NeuronState]:
    if x_t.shape != state.V.shape:
        raise ValueError(f"neuron_step: input shape {x_t.shape} does not match state shape {state.V.shape}")
    if inv_tau is None:
        inv_tau = _inverse_tau(cfg, tau_param)
    v = state.V
    h = v + (x_t - (v - cfg.v_reset)) * inv_tau
    s = surrogate_spike(h - cfg.v_th, cfg.surrogate)
    s_const = stop_gradient(s)
    v_next = h * (1.0 - s_const) + s_const * cfg.v_reset
    out = ops.relu(h) if cfg.mode.analog else s
    return out, NeuronState(v_next)


def neuron_sequence_unrolled(x: Tensor, cfg: NeuronConfig, tau_param: Optional[Tensor] = None,
                             time_axis: int = 0) -> Tensor:
    """Reference unroll built from :func:`neuron_step`, one tape node per operation."""
    steps = x.shape[time_axis]
    if steps == 0:
        raise ValueError("neuron_sequence needs at least one time step")
    lead = (slice(None),) * time_axis
    slice_shape = x.shape[:time_axis] + x.shape[time_axis + 1:]
    state = initial_state(slice_shape, cfg, dtype=x.dtype)
    inv_tau = _inverse_tau(cfg, tau_param)
    outs = []
    for t in range(steps):
        out, state = neuron_step(state, x[lead + (t,)], cfg, inv_tau=inv_tau)
        outs.append(out)
    return ops.stack(outs, axis=time_axis)


def neuron_sequence(x: Tensor, cfg: NeuronConfig, tau_param: Optional[Tensor] = None,
                    time_axis: int = 0) -> Tensor:
    """Run the neuron over the time axis of ``x`` starting from ``V = v_reset``.

    Same values and gradients as :func:`neuron_sequence_unrolled`, computed as a
    single node with backpropagation through time written out by hand.
    """
    steps = x.shape[time_axis]
    if steps == 0:
        raise ValueError("neuron_sequence needs at least one time step")
    xs = np.moveaxis(x.data, time_axis, 0)
    if not np.all(np.isfinite(xs)):
        raise ValueError("neuron_sequence got a non-finite input")
    inv_tau = _inverse_tau(cfg, tau_param)
    a_tensor = inv_tau if isinstance(inv_tau, Tensor) else None
    a = float(a_tensor.data.reshape(())) if a_tensor is not None else float(inv_tau)
    dtype = xs.dtype
    vr, vth, alpha = cfg.v_reset, cfg.v_th, cfg.alpha
    smooth = surrogate_forward_enabled()
    v = np.full(xs.shape[1:], vr, dtype=dtype)
    hs, vs_prev, keep = [], [], []
    outs = np.empty_like(xs)
    for t in range(steps):
        h = v + (xs[t] - (v - vr)) * dtype.type(a)
        s = sigma(h - vth, alpha).astype(dtype) if smooth else heaviside(h - vth)
        s_const = detached_value(s)
        outs[t] = np.maximum(h, 0) if cfg.mode.analog else s
        hs.append(h)
        vs_prev.append(v)
        keep.append(1.0 - s_const)
        v = h * (1.0 - s_const) + s_const * vr

    def bw(g):
        g = np.moveaxis(g, time_axis, 0)
        gx = np.empty_like(xs)
        dv = np.zeros(xs.shape[1:], dtype=g.dtype)
        da = 0.0
        for t in range(steps - 1, -1, -1):
            h = hs[t]
            local = (h > 0) if cfg.mode.analog else sigma_prime(h - vth, alpha)
            dh = g[t] * local + dv * keep[t]
            gx[t] = dh * a
            dv = dh * (1.0 - a)
            if a_tensor is not None:
                da += float((dh * (xs[t] - vs_prev[t] + vr)).sum())
        ga = np.full(a_tensor.shape, da, dtype=a_tensor.dtype) if a_tensor is not None else None
        return np.moveaxis(gx, 0, time_axis), ga

    parents = (x,) if a_tensor is None else (x, a_tensor)
    return make_result(np.moveaxis(outs, 0, time_axis), parents, bw, "neuron_sequence")


class SpikingNeuron(Module):
    """A layer of neurons sharing one configuration (and one learnable tau, if any).

    ``hooks`` are called with each output tensor; instrumentation only.
    """

    def __init__(self, cfg: NeuronConfig, dtype=np.float32):
        self.cfg = cfg
        self.tau_param = Parameter(np.full((1,), tau_param_for(cfg.tau), dtype=dtype)) \
            if cfg.mode.learnable_tau else None
        self.hooks: list[Callable[[Tensor], None]] = []

    def forward(self, x: Tensor, time_axis: int = 0) -> Tensor:
        out = neuron_sequence(x, self.cfg, self.tau_param, time_axis=time_axis)
        for hook in self.hooks:
            hook(out)
        return out

    @property
    def tau(self) -> float:
        return effective_tau(self.cfg, self.tau_param)
