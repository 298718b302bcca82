"""Divided space-time attention blocks and sequence pooling.

Token tensors are laid out as (B, T, N, D); a bare (T, N, D) grid is accepted
wherever a single sample makes sense and is returned in the same layout.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .autodiff import functional as F
from .autodiff import ops
from .autodiff.module import LayerNorm, Linear, Module, truncated_normal, zero_
from .autodiff.tensor import Parameter, Tensor
from .neurons import NeuronConfig, SpikingNeuron

# (B, T, N, H, Dh) -> grouping that puts the attended axis second to last
_TEMPORAL = (0, 2, 3, 1, 4)  # (B, N, H, T, Dh)
_SPATIAL = (0, 1, 3, 2, 4)   # (B, T, H, N, Dh)


class AttentionWeights(Module):
    """Pre-norm, per-head Q/K/V projections and the output projection of one attention sublayer."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if dim % heads:
            raise ValueError(f"{heads} heads do not divide dim {dim}")
        self.heads = heads
        self.norm = LayerNorm(dim, dtype=dtype)
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.k = Linear(dim, dim, rng, dtype=dtype)
        self.v = Linear(dim, dim, rng, dtype=dtype)
        self.o = Linear(dim, dim, rng, dtype=dtype)

    @property
    def head_dim(self) -> int:
        return self.q.weight.shape[1] // self.heads

    def zero_init(self) -> None:
        zero_(self.o.weight)
        zero_(self.o.bias)


def _batched(z: Tensor) -> tuple[Tensor, bool]:
    if z.ndim == 3:
        return z.reshape(1, *z.shape), True
    if z.ndim != 4:
        raise ValueError(f"expected tokens of shape (B, T, N, D) or (T, N, D), got {z.shape}")
    return z, False


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Softmax(q k^T / sqrt(d)) v over the second-to-last axis; returns (output, weights)."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = ops.matmul(q, ops.swapaxes(k, -1, -2)) * scale
    weights = F.softmax(scores, axis=-1)
    return ops.matmul(weights, v), weights


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, n, d = x.shape
    return x.reshape(b, t, n, heads, d // heads)


def project_qkv(z: Tensor, w: AttentionWeights) -> tuple[Tensor, Tensor, Tensor]:
    """Per-head q, k, v of shape (B, T, N, H, Dh). ``z`` is expected already normalised."""
    return (_split_heads(w.q(z), w.heads), _split_heads(w.k(z), w.heads), _split_heads(w.v(z), w.heads))


def divided_heads(q: Tensor, k: Tensor, v: Tensor, over: str) -> tuple[Tensor, Tensor]:
    """Attend over time (same spatial location) or space (same frame).

    Returns concatenated head outputs (B, T, N, H*Dh) and the attention weights.
    """
    perm = {"time": _TEMPORAL, "space": _SPATIAL}[over]
    inv = tuple(int(i) for i in np.argsort(perm))
    out, weights = scaled_dot_attention(q.transpose(perm), k.transpose(perm), v.transpose(perm))
    out = out.transpose(inv)
    b, t, n, h, dh = out.shape
    return out.reshape(b, t, n, h * dh), weights


def joint_heads(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Full space-time attention over all T*N tokens. Used only for instrumentation."""
    b, t, n, h, dh = q.shape

    def flat(x):
        return x.reshape(b, t * n, h, dh).transpose(0, 2, 1, 3)

    out, _ = scaled_dot_attention(flat(q), flat(k), flat(v))
    return out.transpose(0, 2, 1, 3).reshape(b, t, n, h * dh)


def _attention(z: Tensor, w: AttentionWeights, over: str, normalise: bool) -> Tensor:
    zb, single = _batched(z)
    x = w.norm(zb) if normalise else zb
    heads, _ = divided_heads(*project_qkv(x, w), over=over)
    out = w.o(heads)
    return out.reshape(*out.shape[1:]) if single else out


def temporal_attention(z: Tensor, w: AttentionWeights, normalise: bool = False) -> Tensor:
    """Each token attends to the tokens at its spatial location across all T frames."""
    return _attention(z, w, "time", normalise)


def spatial_attention(z: Tensor, w: AttentionWeights, normalise: bool = False) -> Tensor:
    """Each token attends to the N tokens of its own frame."""
    return _attention(z, w, "space", normalise)


def droppath(branch: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Stochastic depth: drop the whole branch per sample (first axis), rescale survivors."""
    if not 0 <= rate < 1:
        raise ValueError(f"droppath rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return branch
    if rng is None:
        raise ValueError("droppath in training mode needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(branch.shape[0]) < keep).astype(branch.dtype) / keep
    return branch * mask.reshape((-1,) + (1,) * (branch.ndim - 1))


class TransformerBlock(Module):
    """Temporal attention, spatial attention, then an MLP with one spiking layer, each residual."""

    def __init__(self, dim: int, heads: int, ratio: int, neuron: NeuronConfig, rng: np.random.Generator,
                 droppath_rate: float = 0.0, dtype=np.float32):
        self.temporal = AttentionWeights(dim, heads, rng, dtype)
        self.spatial = AttentionWeights(dim, heads, rng, dtype)
        self.mlp_norm = LayerNorm(dim, dtype=dtype)
        self.fc1 = Linear(dim, ratio * dim, rng, dtype=dtype)
        self.sn = SpikingNeuron(neuron, dtype=dtype)
        self.fc2 = Linear(ratio * dim, dim, rng, dtype=dtype)
        self.droppath_rate = droppath_rate

    def forward(self, z: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        zb, single = _batched(z)
        rate, train = self.droppath_rate, self.training
        zb = zb + droppath(temporal_attention(zb, self.temporal, normalise=True), rate, train, rng)
        zb = zb + droppath(spatial_attention(zb, self.spatial, normalise=True), rate, train, rng)
        hidden = self.sn(self.fc1(self.mlp_norm(zb)), time_axis=1)
        zb = zb + droppath(self.fc2(hidden), rate, train, rng)
        return zb.reshape(*zb.shape[1:]) if single else zb

    def zero_init(self) -> None:
        self.temporal.zero_init()
        self.spatial.zero_init()
        zero_(self.fc2.weight)
        zero_(self.fc2.bias)


def transformer_block(z_prev: Tensor, w: TransformerBlock, rng: Optional[np.random.Generator] = None) -> Tensor:
    return w(z_prev, rng)


class PositionalEmbedding(Module):
    def __init__(self, steps: int, tokens: int, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.table = Parameter(truncated_normal(rng, (steps, tokens, dim), 0.02, dtype))

    def forward(self, z: Tensor) -> Tensor:
        steps = z.shape[-3]
        table = self.table if steps == self.table.shape[0] else self.table[:steps]
        return add_positional(z, table)


def add_positional(z: Tensor, table: Tensor) -> Tensor:
    if z.shape[-3:] != table.shape:
        raise ValueError(f"positional table {table.shape} does not match tokens {z.shape}")
    return z + table


def sequence_pool(z: Tensor, w_pool: Tensor) -> Tensor:
    """Softmax-weighted sum over the N tokens of each frame: (..., T, N, D) -> (..., T, D).

    ``w_pool`` has shape (D, 1).
    """
    logits = ops.matmul(z, w_pool)                       # (..., T, N, 1)
    weights = F.softmax(logits, axis=-2)
    pooled = ops.matmul(ops.swapaxes(weights, -1, -2), z)  # (..., T, 1, D)
    return pooled.reshape(*pooled.shape[:-2], pooled.shape[-1])
