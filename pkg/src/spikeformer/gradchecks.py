"""Ready-made surrogate-gradient checks for the neuron, one transformer block and a micro model.

Each check builds its subject in float64 and returns the worst relative error
reported by :func:`~spikeformer.autodiff.grad_check`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .attention import TransformerBlock
from .autodiff import grad_check
from .autodiff.tensor import Parameter, Tensor
from .model import ModelSpec, Spikeformer
from .neurons import NeuronConfig, NeuronMode, neuron_sequence, tau_param_for
from .tokenizer import CTStemSpec

TOLERANCE = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tolerance: float = TOLERANCE

    def __post_init__(self):
        object.__setattr__(self, "error", float(self.error))

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def neuron_unroll(seed: int = 0, mode: NeuronMode = NeuronMode.PLIF) -> CheckResult:
    """Three time steps of one layer of neurons; checks the input and the tau parameter."""
    rng = np.random.default_rng(seed)
    cfg = NeuronConfig(mode=mode)
    x = Parameter(rng.normal(0.9, 0.8, size=(3, 5)))
    tau = Parameter(np.array([tau_param_for(cfg.tau)]))
    w = Tensor(rng.normal(size=(3, 5)))
    params = [x, tau] if mode.learnable_tau else [x]

    def f(*_):
        return (neuron_sequence(x, cfg, tau if mode.learnable_tau else None) * w).sum()

    return CheckResult(f"neuron-{mode.value}", grad_check(f, params))


def transformer_block(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    block = TransformerBlock(8, 2, 2, NeuronConfig(), rng, dtype=np.float64)
    z = Parameter(rng.normal(size=(2, 3, 4, 8)))
    w = Tensor(rng.normal(size=(2, 3, 4, 8)))

    def f(*_):
        return (block(z) * w).sum()

    return CheckResult("block", grad_check(f, [z] + block.parameters()))


def micro_spec() -> ModelSpec:
    """T=2, 8x8 input, D=16, one layer."""
    stem = CTStemSpec(3, 1, 1, (16,), 2)
    return ModelSpec("micro", 1, 2, 1, 16, stem, num_classes=3, timesteps=2, image_size=(8, 8))


def micro_model(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = Spikeformer(micro_spec(), seed=seed, dtype=np.float64)
    frames = Tensor(rng.poisson(0.6, size=(2, 2, 2, 8, 8)).astype(np.float64))
    w = Tensor(rng.normal(size=(2, 3)))

    def f(*_):
        return (model(frames) * w).sum()

    return CheckResult("model", grad_check(f, model.parameters(), max_coords=48, seed=seed))


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "neuron": neuron_unroll,
    "block": transformer_block,
    "model": micro_model,
}


def run(names=None) -> list[CheckResult]:
    names = list(CHECKS) if names is None else list(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ValueError(f"unknown gradcheck module(s) {unknown}; choose from {sorted(CHECKS)}")
    return [CHECKS[n]() for n in names]
