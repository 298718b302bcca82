"""Convolutional tokenizer: SEW-style residual conv blocks turning frame sequences into tokens."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import functional as F
from .autodiff.module import BatchNorm2d, Conv2d, Module, zero_
from .autodiff.tensor import Tensor
from .neurons import NeuronConfig, SpikingNeuron


@dataclass(frozen=True)
class CTStemSpec:
    """Stem layout ``k x m x s``: ``s`` stages of ``m`` blocks each, first block of a stage downsamples."""

    kernel_size: int
    blocks_per_stage: int
    num_stages: int
    stage_channels: tuple[int, ...] = field(default=())
    input_channels: int = 2

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {self.kernel_size}")
        if self.blocks_per_stage < 1 or self.num_stages < 1:
            raise ValueError(f"need at least one stage and one block per stage, got "
                             f"{self.blocks_per_stage}x{self.num_stages}")
        if len(self.stage_channels) != self.num_stages:
            raise ValueError(f"{self.num_stages} stages but {len(self.stage_channels)} channel entries")

    @classmethod
    def for_dim(cls, kernel_size: int, blocks_per_stage: int, num_stages: int, dim: int,
                input_channels: int = 2) -> "CTStemSpec":
        """Channels double per stage and the last stage reaches ``dim``."""
        channels = tuple(dim >> (num_stages - 1 - i) for i in range(num_stages))
        if channels[0] < 1 or channels[0] << (num_stages - 1) != dim:
            raise ValueError(f"dim {dim} cannot be halved {num_stages - 1} times")
        return cls(kernel_size, blocks_per_stage, num_stages, channels, input_channels)

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1]

    def output_extent(self, height: int, width: int) -> tuple[int, int]:
        f = 2 ** self.num_stages
        if height % f or width % f:
            raise ValueError(f"input {height}x{width} is not divisible by 2^{self.num_stages} = {f}")
        return height // f, width // f

    def num_tokens(self, height: int, width: int) -> int:
        h, w = self.output_extent(height, width)
        return h * w


@dataclass
class TokenGrid:
    """Tokens of shape (..., T, N, D) with N = H' * W' in row-major spatial order."""

    values: Tensor
    spatial_shape: tuple[int, int]

    def __post_init__(self):
        h, w = self.spatial_shape
        if self.values.shape[-2] != h * w:
            raise ValueError(f"token count {self.values.shape[-2]} != {h}*{w}")


class ConvUnit(Module):
    """Conv2d -> BatchNorm -> spiking neurons, on (T, B, C, H, W) with time folded into the batch."""

    def __init__(self, cin: int, cout: int, k: int, stride: int, neuron: NeuronConfig,
                 rng: np.random.Generator, dtype=np.float32):
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)
        self.sn = SpikingNeuron(neuron, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        t, b = x.shape[:2]
        y = self.bn(self.conv(x.reshape(t * b, *x.shape[2:])))
        return self.sn(y.reshape(t, b, *y.shape[1:]), time_axis=0)

    def zero_init(self) -> None:
        zero_(self.conv.kernel)
        zero_(self.bn.beta)


class CTNormal(Module):
    """``x + conv(conv(x))``, channel-preserving."""

    def __init__(self, channels: int, k: int, neuron: NeuronConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.conv1 = ConvUnit(channels, channels, k, 1, neuron, rng, dtype)
        self.conv2 = ConvUnit(channels, channels, k, 1, neuron, rng, dtype)
        self.channels = channels

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] != self.channels:
            raise ValueError(f"normal CT block expects {self.channels} channels, got {x.shape[2]}")
        return self.conv2(self.conv1(x)) + x

    def zero_init(self) -> None:
        self.conv1.zero_init()
        self.conv2.zero_init()


class CTDownsample(Module):
    """``conv(conv_s2(x)) + conv1x1(avgpool2x2(x))``; halves the extent, changes channels."""

    def __init__(self, cin: int, cout: int, k: int, neuron: NeuronConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.conv1 = ConvUnit(cin, cout, k, 2, neuron, rng, dtype)
        self.conv2 = ConvUnit(cout, cout, k, 1, neuron, rng, dtype)
        self.shortcut = ConvUnit(cin, cout, 1, 1, neuron, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        t, b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"downsample CT block needs even extents, got {h}x{w}")
        pooled = F.avg_pool_2x2(x.reshape(t * b, c, h, w))
        short = self.shortcut(pooled.reshape(t, b, c, h // 2, w // 2))
        return self.conv2(self.conv1(x)) + short

    def zero_init(self) -> None:
        for unit in (self.conv1, self.conv2, self.shortcut):
            unit.zero_init()


class CTStem(Module):
    def __init__(self, spec: CTStemSpec, neuron: NeuronConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.spec = spec
        blocks: list[Module] = []
        cin = spec.input_channels
        for cout in spec.stage_channels:
            blocks.append(CTDownsample(cin, cout, spec.kernel_size, neuron, rng, dtype))
            for _ in range(spec.blocks_per_stage - 1):
                blocks.append(CTNormal(cout, spec.kernel_size, neuron, rng, dtype))
            cin = cout
        self.blocks = blocks

    def forward(self, frames: Tensor) -> Tensor:
        if frames.ndim != 5:
            raise ValueError(f"stem expects (T, B, C, H, W) frames, got shape {frames.shape}")
        if frames.shape[2] != self.spec.input_channels:
            raise ValueError(f"stem expects {self.spec.input_channels} input channels, got {frames.shape[2]}")
        self.spec.output_extent(*frames.shape[3:])
        x = frames
        for block in self.blocks:
            x = block(x)
        return x


def tokenize(frames: Tensor, stem: CTStem, dim: Optional[int] = None) -> TokenGrid:
    """Run the stem and flatten (T, B, D, H', W') into a (B, T, N, D) token grid."""
    out = stem(frames)
    t, b, d, h, w = out.shape
    if dim is not None and d != dim:
        raise ValueError(f"stem produces {d}-dim tokens, expected {dim}")
    values = out.transpose(1, 0, 3, 4, 2).reshape(b, t, h * w, d)
    return TokenGrid(values, (h, w))
