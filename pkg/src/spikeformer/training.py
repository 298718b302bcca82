"""Loss, optimizers, learning-rate schedules and the train/eval loops."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Tensor, no_grad
from .data import AugmentConfig, FrameSample, augment
from .model import Spikeformer

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    base_lr: float = 1e-3
    weight_decay: float = 1.5e-4
    batch_size: int = 16
    epochs: int = 150
    warmup_epochs: int = 20
    schedule: str = "constant"
    step_period: int = 192
    step_factor: float = 0.1
    lr_min: float = 0.0
    lr_milestones: tuple[int, ...] = ()
    label_smoothing: float = 0.0
    droppath_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "step", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.base_lr < 0:
            raise ValueError(f"learning rate must be nonnegative, got {self.base_lr}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup ({self.warmup_epochs}) must be shorter than training ({self.epochs})")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError(f"label smoothing must lie in [0, 1), got {self.label_smoothing}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be positive, got {self.batch_size}")
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))


# -- loss -----------------------------------------------------------------------

def smoothed_cross_entropy(logits: Tensor, labels: Sequence[int], eps: float = 0.0) -> Tensor:
    """Mean cross-entropy against targets ``(1 - eps) * onehot + eps / K``."""
    if not 0 <= eps < 1:
        raise ValueError(f"smoothing must lie in [0, 1), got {eps}")
    b, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    target = np.full((b, k), eps / k, dtype=logits.dtype)
    target[np.arange(b), labels] += 1.0 - eps
    return -(F.log_softmax(logits, axis=-1) * target).sum() * (1.0 / b)


# -- optimizers ---------------------------------------------------------------------

def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """In-place Adam update with bias correction; weight decay is added to the gradient."""
    if "m" not in state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
        state["step"] = 0
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if weight_decay:
            g = g + weight_decay * p
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


def sgd_momentum_step(params: list[np.ndarray], grads: list[np.ndarray], state: dict, lr: float,
                      momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """``v <- mu v + (g + wd p)``, ``p <- p - lr v``, in place."""
    if "velocity" not in state:
        state["velocity"] = [np.zeros_like(p) for p in params]
    for p, g, vel in zip(params, grads, state["velocity"]):
        vel *= momentum
        vel += g + weight_decay * p if weight_decay else g
        p -= (lr * vel).astype(p.dtype, copy=False)


class Optimizer:
    def __init__(self, params, config: TrainConfig):
        self.params = list(params)
        self.config = config
        self.state: dict = {}

    def step(self, lr: float) -> None:
        params = [p.data for p in self.params]
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        c = self.config
        if c.optimizer == "adam":
            adam_step(params, grads, self.state, lr, c.beta1, c.beta2, weight_decay=c.weight_decay)
        else:
            sgd_momentum_step(params, grads, self.state, lr, c.momentum, c.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self, model) -> tuple[dict[str, np.ndarray], dict[str, str]]:
        names = [n for n, _ in model.named_parameters()]
        arrays = {}
        for key in ("m", "v", "velocity"):
            for n, a in zip(names, self.state.get(key, ())):
                arrays[f"{key}/{n}"] = a
        return arrays, {"optimizer": self.config.optimizer, "step": str(self.state.get("step", 0))}

    def load_state_dict(self, model, arrays: dict[str, np.ndarray], extra: dict[str, str]) -> None:
        names = [n for n, _ in model.named_parameters()]
        for key in ("m", "v", "velocity"):
            if f"{key}/{names[0]}" in arrays:
                self.state[key] = [arrays[f"{key}/{n}"].astype(p.dtype) for n, p in model.named_parameters()]
        if "step" in extra:
            self.state["step"] = int(extra["step"])


# -- schedule -------------------------------------------------------------------------

def lr_at(config: TrainConfig, epoch: int, step_in_epoch: int = 0, steps_per_epoch: int = 1) -> float:
    """Linear warmup from 0, then the configured schedule; milestones multiply by 0.1 each."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    base = config.base_lr
    position = epoch + step_in_epoch / steps_per_epoch
    if epoch < config.warmup_epochs:
        return base * position / config.warmup_epochs
    if config.schedule == "step":
        lr = base * config.step_factor ** (epoch // config.step_period)
    elif config.schedule == "cosine":
        progress = (position - config.warmup_epochs) / (config.epochs - config.warmup_epochs)
        lr = config.lr_min + 0.5 * (base - config.lr_min) * (1.0 + math.cos(math.pi * progress))
    else:
        lr = base
    passed = sum(1 for m in config.lr_milestones if epoch >= m)
    return lr * 0.1 ** passed


# -- loops ------------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    eval_acc: Optional[float]
    lr: float
    wall_time: float


@dataclass
class RunReport:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def train_loss(self) -> list[float]:
        return [r.train_loss for r in self.records]

    @property
    def train_acc(self) -> list[float]:
        return [r.train_acc for r in self.records]

    @property
    def eval_acc(self) -> list[Optional[float]]:
        return [r.eval_acc for r in self.records]

    @property
    def lr(self) -> list[float]:
        return [r.lr for r in self.records]

    @property
    def wall_time(self) -> list[float]:
        return [r.wall_time for r in self.records]

    def timing_free(self) -> list[dict]:
        """Records without wall time; what the determinism contract compares."""
        out = []
        for r in self.records:
            d = asdict(r)
            d.pop("wall_time")
            out.append(d)
        return out

    def lines(self) -> list[str]:
        return [json.dumps(asdict(r), sort_keys=True) for r in self.records]


def batch_frames(frames: np.ndarray) -> Tensor:
    """(B, T, C, H, W) samples -> (T, B, C, H, W) model input."""
    return Tensor(np.ascontiguousarray(frames.transpose(1, 0, 2, 3, 4)))


def train_epoch(model: Spikeformer, frames: np.ndarray, labels: np.ndarray, config: TrainConfig,
                optimizer: Optimizer, epoch: int, augment_cfg: Optional[AugmentConfig] = None,
                rng: Optional[np.random.Generator] = None) -> tuple[float, float, float]:
    """One pass over the training set; returns (mean loss, accuracy, last lr)."""
    if rng is None:
        rng = np.random.default_rng([config.seed, epoch])
    model.train()
    model.set_droppath(config.droppath_rate)
    n = len(frames)
    order = rng.permutation(n)
    steps = math.ceil(n / config.batch_size)
    total_loss, correct, lr = 0.0, 0, 0.0
    for i in range(steps):
        idx = order[i * config.batch_size:(i + 1) * config.batch_size]
        batch = frames[idx]
        if augment_cfg is not None and augment_cfg.enabled:
            batch = np.stack([augment(FrameSample(f), augment_cfg, rng).frames for f in batch])
        batch = batch.astype(model.head.weight.dtype, copy=False)
        logits = model(batch_frames(batch), rng)
        loss = smoothed_cross_entropy(logits, labels[idx], config.label_smoothing)
        value = float(loss.data)
        lr = lr_at(config, epoch, i, steps)
        if not math.isfinite(value):
            raise TrainingDivergedError(f"non-finite loss {value} at epoch {epoch}, batch {i}, lr {lr:.3g}")
        optimizer.zero_grad()
        loss.backward(retain_grads=False)
        optimizer.step(lr)
        total_loss += value * len(idx)
        correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
    return total_loss / n, correct / n, lr


def predict(model: Spikeformer, frames: np.ndarray, batch_size: int = 32) -> np.ndarray:
    was_training = model.training
    model.eval()
    preds = []
    try:
        with no_grad():
            for i in range(0, len(frames), batch_size):
                batch = frames[i:i + batch_size].astype(model.head.weight.dtype, copy=False)
                preds.append(model(batch_frames(batch)).data.argmax(axis=1))
    finally:
        model.train(was_training)
    return np.concatenate(preds)


def evaluate(model: Spikeformer, frames: np.ndarray, labels: np.ndarray, batch_size: int = 32) -> float:
    """Top-1 accuracy in eval mode (running BN statistics, no droppath, no augmentation)."""
    if len(frames) == 0:
        raise ValueError("cannot evaluate on an empty split")
    return float((predict(model, frames, batch_size) == np.asarray(labels)).mean())


def fit(model: Spikeformer, train: tuple[np.ndarray, np.ndarray], config: TrainConfig,
        test: Optional[tuple[np.ndarray, np.ndarray]] = None, augment_cfg: Optional[AugmentConfig] = None,
        on_epoch: Optional[Callable[[EpochRecord], None]] = None,
        optimizer: Optional[Optimizer] = None, start_epoch: int = 0) -> tuple[RunReport, Optimizer]:
    optimizer = optimizer or Optimizer(model.parameters(), config)
    report = RunReport()
    for epoch in range(start_epoch, config.epochs):
        t0 = time.perf_counter()
        loss, acc, lr = train_epoch(model, *train, config, optimizer, epoch, augment_cfg)
        eval_acc = evaluate(model, *test) if test is not None else None
        rec = EpochRecord(epoch, loss, acc, eval_acc, lr, time.perf_counter() - t0)
        report.records.append(rec)
        log.info("epoch %d loss %.4f train %.3f eval %s lr %.3g (%.1fs)", epoch, loss, acc,
                 "-" if eval_acc is None else f"{eval_acc:.3f}", lr, rec.wall_time)
        if on_epoch is not None:
            on_epoch(rec)
    return report, optimizer
