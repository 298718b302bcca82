"""Variant parsing, network assembly, parameter counting and checkpoints."""

from __future__ import annotations

import io
import re
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .attention import PositionalEmbedding, TransformerBlock, sequence_pool
from .autodiff import tensorio
from .autodiff.module import LayerNorm, Linear, Module, count_parameters as _count, truncated_normal
from .autodiff.tensor import Parameter, Tensor
from .neurons import NeuronConfig, NeuronMode
from .tokenizer import CTStem, CTStemSpec, tokenize

# layers, heads, MLP ratio, dim
VARIANTS: dict[str, tuple[int, int, int, int]] = {
    "2": (2, 2, 1, 128),
    "4": (4, 2, 1, 128),
    "7": (7, 4, 2, 256),
    "7L": (7, 8, 3, 512),
}

_VARIANT_RE = re.compile(r"^Spikeformer-(?P<v>[^/]+)/(?P<layout>.+)$")
_LAYOUT_RE = re.compile(r"^(\d+)[x×](\d+)[x×](\d+)$")


# The positional table covers at least this many time steps; shorter runs use its first T rows.
POSITION_STEPS = 16


class VariantError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    variant: str
    layers: int
    heads: int
    ratio: int
    dim: int
    stem: CTStemSpec
    num_classes: int = 10
    timesteps: int = 4
    neuron_mode: NeuronMode = NeuronMode.PLIF
    image_size: tuple[int, int] = (128, 128)
    position_steps: int = POSITION_STEPS

    def __post_init__(self):
        if self.dim % self.heads:
            raise VariantError(f"{self.heads} heads do not divide dim {self.dim}")
        if self.stem.out_channels != self.dim:
            raise VariantError(f"stem ends at {self.stem.out_channels} channels, transformer dim is {self.dim}")
        object.__setattr__(self, "neuron_mode", NeuronMode(self.neuron_mode))
        self.stem.output_extent(*self.image_size)

    @property
    def table_steps(self) -> int:
        return max(self.timesteps, self.position_steps)

    @property
    def num_tokens(self) -> int:
        return self.stem.num_tokens(*self.image_size)

    @property
    def name(self) -> str:
        s = self.stem
        return f"Spikeformer-{self.variant}/{s.kernel_size}x{s.blocks_per_stage}x{s.num_stages}"

    def with_(self, **changes) -> "ModelSpec":
        return replace(self, **changes)

    def to_metadata(self) -> dict[str, str]:
        s = self.stem
        return {
            "variant": self.variant, "layers": str(self.layers), "heads": str(self.heads),
            "ratio": str(self.ratio), "dim": str(self.dim), "kernel": str(s.kernel_size),
            "blocks_per_stage": str(s.blocks_per_stage), "stages": str(s.num_stages),
            "stage_channels": ",".join(map(str, s.stage_channels)), "input_channels": str(s.input_channels),
            "classes": str(self.num_classes), "T": str(self.timesteps), "neuron": self.neuron_mode.value,
            "image": f"{self.image_size[0]}x{self.image_size[1]}", "position_steps": str(self.position_steps),
        }

    @classmethod
    def from_metadata(cls, meta: dict[str, str]) -> "ModelSpec":
        stem = CTStemSpec(int(meta["kernel"]), int(meta["blocks_per_stage"]), int(meta["stages"]),
                          tuple(int(c) for c in meta["stage_channels"].split(",")), int(meta["input_channels"]))
        h, w = (int(v) for v in meta["image"].split("x"))
        return cls(meta["variant"], int(meta["layers"]), int(meta["heads"]), int(meta["ratio"]),
                   int(meta["dim"]), stem, int(meta["classes"]), int(meta["T"]), NeuronMode(meta["neuron"]),
                   (h, w), int(meta.get("position_steps", POSITION_STEPS)))


def parse_variant(text: str, num_classes: int = 10, timesteps: int = 4, input_channels: int = 2,
                  image_size: Optional[tuple[int, int]] = None,
                  neuron_mode: Union[str, NeuronMode] = NeuronMode.PLIF) -> ModelSpec:
    """Parse ``Spikeformer-<v>/<k>x<m>x<s>`` (``x`` or ``×``).

    Without ``image_size``: 224x224 for four stages, 128x128 otherwise.
    """
    m = _VARIANT_RE.match(text.strip())
    if not m:
        raise VariantError(f"malformed variant {text!r}: expected 'Spikeformer-<v>/<k>x<m>x<s>'")
    v, layout = m.group("v"), m.group("layout")
    if v not in VARIANTS:
        raise VariantError(f"unknown variant {v!r} in {text!r}; known: {', '.join(VARIANTS)}")
    lm = _LAYOUT_RE.match(layout)
    if not lm:
        raise VariantError(f"malformed CT layout {layout!r} in {text!r}: expected '<k>x<m>x<s>'")
    k, blocks, stages = (int(g) for g in lm.groups())
    layers, heads, ratio, dim = VARIANTS[v]
    try:
        stem = CTStemSpec.for_dim(k, blocks, stages, dim, input_channels)
    except ValueError as exc:
        raise VariantError(f"invalid CT layout {layout!r} in {text!r}: {exc}") from None
    if image_size is None:
        image_size = (224, 224) if stages == 4 else (128, 128)
    return ModelSpec(v, layers, heads, ratio, dim, stem, num_classes, timesteps, NeuronMode(neuron_mode),
                     tuple(image_size))


class Spikeformer(Module):
    """CT stem -> positional embedding -> L blocks -> LayerNorm -> sequence pool -> mean over T -> classifier."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32, droppath_rate: float = 0.0):
        rng = np.random.default_rng(seed)
        self.spec = spec
        neuron = NeuronConfig(mode=spec.neuron_mode)
        self.stem = CTStem(spec.stem, neuron, rng, dtype)
        self.pos = PositionalEmbedding(spec.table_steps, spec.num_tokens, spec.dim, rng, dtype)
        self.blocks = [TransformerBlock(spec.dim, spec.heads, spec.ratio, neuron, rng, droppath_rate, dtype)
                       for _ in range(spec.layers)]
        self.norm = LayerNorm(spec.dim, dtype=dtype)
        self.pool = Parameter(truncated_normal(rng, (spec.dim, 1), 0.02, dtype))
        self.head = Linear(spec.dim, spec.num_classes, rng, dtype=dtype)

    def set_droppath(self, rate: float) -> None:
        for b in self.blocks:
            b.droppath_rate = rate

    def features(self, frames: Tensor) -> Tensor:
        """Stem tokens with positional embedding, shape (B, T, N, D)."""
        if frames.shape[0] != self.spec.timesteps:
            raise ValueError(f"model built for T={self.spec.timesteps}, got {frames.shape[0]} time steps")
        return self.pos(tokenize(frames, self.stem, self.spec.dim).values)

    def head_from_tokens(self, z: Tensor) -> Tensor:
        pooled = sequence_pool(self.norm(z), self.pool)   # (B, T, D)
        return self.head(pooled.mean(axis=1))

    def forward(self, frames: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        z = self.features(frames)
        for block in self.blocks:
            z = block(z, rng)
        return self.head_from_tokens(z)


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32, droppath_rate: float = 0.0) -> Spikeformer:
    return Spikeformer(spec, seed=seed, dtype=dtype, droppath_rate=droppath_rate)


def count_parameters(spec_or_module: Union[ModelSpec, Module]) -> int:
    module = spec_or_module
    if isinstance(spec_or_module, ModelSpec):
        module = Spikeformer(spec_or_module)
    return _count(module)


def forward(frames: Tensor, model: Spikeformer, rng: Optional[np.random.Generator] = None) -> Tensor:
    return model(frames, rng)


# -- checkpoints --------------------------------------------------------------

CKPT_MAGIC = b"SPKC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    seed: int = 0
    extra: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Spikeformer, optimizer=None, epoch: int = 0, seed: int = 0) -> "Checkpoint":
        params = {n: p.data.copy() for n, p in model.named_parameters()}
        buffers = {n: b.copy() for n, b in model.named_buffers()}
        opt_state, extra = {}, {}
        if optimizer is not None:
            opt_state, extra = optimizer.state_dict(model)
        return cls(model.spec, params, buffers, opt_state, epoch, seed, extra)

    def load_into(self, model: Spikeformer) -> None:
        names = {n for n, _ in model.named_parameters()}
        if names != set(self.params):
            missing = sorted(names - set(self.params))[:3]
            unexpected = sorted(set(self.params) - names)[:3]
            raise CheckpointMismatchError(
                f"parameter names differ from model {model.spec.name}: missing {missing}, unexpected {unexpected}")
        for n, p in model.named_parameters():
            if p.shape != self.params[n].shape:
                raise CheckpointMismatchError(f"parameter {n}: checkpoint shape {self.params[n].shape} != {p.shape}")
            p.data[...] = self.params[n]
        for n, b in model.named_buffers():
            if n in self.buffers:
                b[...] = self.buffers[n]

    def to_model(self, dtype=np.float32) -> Spikeformer:
        model = Spikeformer(self.spec, seed=self.seed, dtype=dtype)
        self.load_into(model)
        return model


def _write_blob(out: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    out.write(struct.pack("<H", len(raw)) + raw)
    tensorio.write(out, arr)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = dict(ckpt.spec.to_metadata())
    meta["seed"] = str(ckpt.seed)
    meta["epoch"] = str(ckpt.epoch)
    for k, v in ckpt.extra.items():
        meta[f"x.{k}"] = v
    meta_raw = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
    out = io.BytesIO()
    out.write(CKPT_MAGIC + struct.pack("<H", CKPT_VERSION) + struct.pack("<I", len(meta_raw)) + meta_raw)
    blobs = ([(f"param/{n}", a) for n, a in ckpt.params.items()]
             + [(f"buffer/{n}", a) for n, a in ckpt.buffers.items()]
             + [(f"optim/{n}", a) for n, a in ckpt.optimizer.items()])
    out.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs:
        _write_blob(out, name, arr)
    return out.getvalue()


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def _take(buf: io.BytesIO, n: int, what: str) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointCorruptError(f"checkpoint truncated while reading {what} at byte {buf.tell() - len(data)}")
    return data


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    buf = io.BytesIO(Path(path).read_bytes())
    magic = _take(buf, 4, "magic")
    if magic != CKPT_MAGIC:
        raise CheckpointCorruptError(f"not a checkpoint: bad magic {magic!r}")
    (version,) = struct.unpack("<H", _take(buf, 2, "version"))
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {CKPT_VERSION}")
    (meta_len,) = struct.unpack("<I", _take(buf, 4, "metadata length"))
    try:
        lines = _take(buf, meta_len, "metadata").decode("utf-8").splitlines()
        meta = dict(line.split("=", 1) for line in lines if line)
        spec = ModelSpec.from_metadata(meta)
    except (UnicodeDecodeError, KeyError, ValueError) as exc:
        raise CheckpointCorruptError(f"unreadable checkpoint metadata: {exc}") from None
    (count,) = struct.unpack("<I", _take(buf, 4, "tensor count"))
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "optim": {}}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _take(buf, 2, "tensor name length"))
        name = _take(buf, nlen, "tensor name").decode("utf-8")
        try:
            arr = tensorio.read(buf)
        except tensorio.TensorFormatError as exc:
            raise CheckpointCorruptError(f"tensor {name!r}: {exc}") from None
        kind, _, key = name.partition("/")
        if kind not in groups:
            raise CheckpointCorruptError(f"unknown tensor group in name {name!r}")
        groups[kind][key] = arr
    if buf.read(1):
        raise CheckpointCorruptError("trailing bytes after the last tensor")
    extra = {k[2:]: v for k, v in meta.items() if k.startswith("x.")}
    return Checkpoint(spec, groups["param"], groups["buffer"], groups["optim"],
                      int(meta.get("epoch", 0)), int(meta.get("seed", 0)), extra)
