"""Minimal dense-tensor engine with reverse-mode differentiation."""

from .functional import avg_pool_2x2, batch_norm, conv2d, layer_norm, linear, log_softmax, softmax
from .gradcheck import NonDeterministicError, grad_check
from .module import BatchNorm2d, Conv2d, LayerNorm, Linear, Module, count_parameters
from .ops import (concat, count_macs, exp, getitem, log, matmul, mean, relu, reshape, softplus,
                  stack, sum, swapaxes, transpose)
from .spike import (SurrogateConfig, freeze_detached, sigma, sigma_prime, stop_gradient,
                    surrogate_forward, surrogate_spike)
from .tensor import Parameter, Tape, Tensor, backward, no_grad

batch_norm_step = batch_norm

__all__ = [
    "Tensor", "Parameter", "Tape", "backward", "no_grad",
    "surrogate_spike", "stop_gradient", "SurrogateConfig", "surrogate_forward", "freeze_detached",
    "sigma", "sigma_prime",
    "linear", "softmax", "log_softmax", "layer_norm", "batch_norm", "batch_norm_step", "conv2d",
    "avg_pool_2x2", "grad_check", "NonDeterministicError",
    "matmul", "relu", "softplus", "exp", "log", "sum", "mean", "reshape", "transpose", "swapaxes",
    "getitem", "stack", "concat", "count_macs",
    "Module", "Linear", "LayerNorm", "BatchNorm2d", "Conv2d", "count_parameters",
]
