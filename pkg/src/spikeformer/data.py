"""Event-camera data: the AER file format, event-to-frame binning, augmentation, synthetic gestures.

AER file layout (little-endian)::

    "SPKE" | version u16 | width u16 | height u16 | label i32 (-1 unlabeled) | count u64
    count x {t u64, x u16, y u16, polarity u8, pad u8}

Dataset directories are laid out as ``<root>/<split>/<class_id>/<sample>.aer``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence, Union

import numpy as np

AER_MAGIC = b"SPKE"
AER_VERSION = 1
HEADER = struct.Struct("<4sHHHiQ")
EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1"), ("pad", "u1")])


class AERError(ValueError):
    """Malformed AER file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class AERMagicError(AERError):
    pass


class AERVersionError(AERError):
    pass


class AERTruncatedError(AERError):
    pass


class AERBoundsError(AERError):
    pass


class AERTimestampError(AERError):
    pass


class AEREvent(NamedTuple):
    t: int
    x: int
    y: int
    polarity: int


def make_events(t, x, y, p) -> np.ndarray:
    ev = np.zeros(len(t), dtype=EVENT_DTYPE)
    ev["t"], ev["x"], ev["y"], ev["p"] = t, x, y, p
    return ev


@dataclass
class EventStream:
    width: int
    height: int
    events: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=EVENT_DTYPE))
    label: Optional[int] = None

    def __post_init__(self):
        self.events = np.asarray(self.events, dtype=EVENT_DTYPE)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[AEREvent]:
        for e in self.events:
            yield AEREvent(int(e["t"]), int(e["x"]), int(e["y"]), int(e["p"]))

    def validate(self) -> None:
        ev = self.events
        bad = np.flatnonzero((ev["x"] >= self.width) | (ev["y"] >= self.height) | (ev["p"] > 1))
        if bad.size:
            i = int(bad[0])
            raise AERBoundsError(f"event {i} at ({ev['x'][i]}, {ev['y'][i]}, p={ev['p'][i]}) outside "
                                 f"{self.width}x{self.height} sensor", HEADER.size + i * EVENT_DTYPE.itemsize)
        back = np.flatnonzero(np.diff(ev["t"].astype(np.int64)) < 0) if len(ev) > 1 else []
        if len(back):
            i = int(back[0]) + 1
            raise AERTimestampError(f"event {i} timestamp {ev['t'][i]} precedes {ev['t'][i - 1]}",
                                    HEADER.size + i * EVENT_DTYPE.itemsize)


@dataclass
class FrameSample:
    frames: np.ndarray      # (T, 2, H, W) event counts per polarity
    label: Optional[int] = None


def aer_bytes(stream: EventStream) -> bytes:
    ev = np.ascontiguousarray(stream.events, dtype=EVENT_DTYPE).copy()
    ev["pad"] = 0
    label = -1 if stream.label is None else int(stream.label)
    head = HEADER.pack(AER_MAGIC, AER_VERSION, stream.width, stream.height, label, len(ev))
    return head + ev.tobytes()


def save_aer(stream: EventStream, path: Union[str, Path]) -> None:
    stream.validate()
    Path(path).write_bytes(aer_bytes(stream))


def parse_aer(buf: bytes) -> EventStream:
    if len(buf) < HEADER.size:
        if buf[:4] != AER_MAGIC[:len(buf[:4])]:
            raise AERMagicError(f"bad magic {buf[:4]!r}", 0)
        raise AERTruncatedError(f"header needs {HEADER.size} bytes, file has {len(buf)}", len(buf))
    magic, version, width, height, label, count = HEADER.unpack_from(buf)
    if magic != AER_MAGIC:
        raise AERMagicError(f"bad magic {magic!r}", 0)
    if version != AER_VERSION:
        raise AERVersionError(f"unsupported AER version {version}", 4)
    need = HEADER.size + count * EVENT_DTYPE.itemsize
    if len(buf) < need:
        raise AERTruncatedError(f"header declares {count} events but payload is short", len(buf))
    if len(buf) > need:
        raise AERError(f"{len(buf) - need} trailing bytes after {count} events", need)
    events = np.frombuffer(buf, dtype=EVENT_DTYPE, count=count, offset=HEADER.size).copy()
    stream = EventStream(width, height, events, None if label < 0 else label)
    stream.validate()
    return stream


def load_aer(path: Union[str, Path]) -> EventStream:
    return parse_aer(Path(path).read_bytes())


def slice_bounds(count: int, steps: int) -> np.ndarray:
    """Slice j covers event indices ``[floor(j*M/T), floor((j+1)*M/T))``."""
    return (np.arange(steps + 1, dtype=np.int64) * count) // steps


def bin_events(stream: EventStream, steps: int) -> FrameSample:
    """Split the stream into ``steps`` equal-count slices and histogram each by polarity."""
    if steps < 1:
        raise ValueError(f"need at least one time step, got {steps}")
    m = len(stream.events)
    if m == 0:
        raise ValueError("cannot bin an empty event stream")
    bounds = slice_bounds(m, steps)
    slice_of = np.searchsorted(bounds, np.arange(m), side="right") - 1
    ev = stream.events
    frames = np.zeros((steps, 2, stream.height, stream.width), dtype=np.float32)
    np.add.at(frames, (slice_of, ev["p"].astype(np.intp), ev["y"].astype(np.intp), ev["x"].astype(np.intp)), 1.0)
    return FrameSample(frames, stream.label)


def static_frames(image: np.ndarray, steps: int) -> np.ndarray:
    """Present a (C, H, W) image at every one of ``steps`` time steps."""
    return np.repeat(np.asarray(image, dtype=np.float32)[None], steps, axis=0)


# -- augmentation -------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.0
    shift_range: int = 0
    cutout_range: Optional[tuple[int, int]] = None
    crop_padding: int = 0
    label_smoothing: float = 0.0

    def __post_init__(self):
        if not 0 <= self.flip_prob <= 1:
            raise ValueError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError(f"label smoothing must lie in [0, 1), got {self.label_smoothing}")
        if self.cutout_range is not None and not 0 <= self.cutout_range[0] <= self.cutout_range[1]:
            raise ValueError(f"bad cutout range {self.cutout_range}")

    @property
    def enabled(self) -> bool:
        return bool(self.flip_prob or self.shift_range or self.crop_padding
                    or (self.cutout_range and self.cutout_range[1] > 0))


PROFILES: dict[str, AugmentConfig] = {
    "gesture": AugmentConfig(),
    "cifar-dvs": AugmentConfig(flip_prob=0.5, shift_range=5, cutout_range=(1, 16), label_smoothing=0.14),
    "static": AugmentConfig(flip_prob=0.5, crop_padding=4, label_smoothing=0.1),
}


def shift_frames(frames: np.ndarray, a: int, b: int) -> np.ndarray:
    """Translate by ``a`` pixels rightwards and ``b`` pixels upwards, zero-filling vacated pixels."""
    h, w = frames.shape[-2:]
    out = np.zeros_like(frames)
    src_y = slice(max(b, 0), h + min(b, 0))
    dst_y = slice(max(-b, 0), h - max(b, 0))
    src_x = slice(max(-a, 0), w - max(a, 0))
    dst_x = slice(max(a, 0), w + min(a, 0))
    if src_y.start < src_y.stop and src_x.start < src_x.stop:
        out[..., dst_y, dst_x] = frames[..., src_y, src_x]
    return out


def cutout(frames: np.ndarray, x0: int, y0: int, length: int, height: int) -> np.ndarray:
    out = frames.copy()
    out[..., y0:y0 + height, x0:x0 + length] = 0
    return out


def augment(sample: FrameSample, cfg: AugmentConfig, rng: np.random.Generator) -> FrameSample:
    """Apply one random flip / shift / cutout / crop, identical across all time steps."""
    frames = sample.frames
    h, w = frames.shape[-2:]
    if cfg.crop_padding:
        p = cfg.crop_padding
        padded = np.pad(frames, [(0, 0)] * (frames.ndim - 2) + [(p, p), (p, p)])
        y0, x0 = rng.integers(0, 2 * p + 1, size=2)
        frames = padded[..., y0:y0 + h, x0:x0 + w]
    if cfg.flip_prob and rng.random() < cfg.flip_prob:
        frames = frames[..., ::-1]
    if cfg.shift_range:
        a, b = rng.integers(-cfg.shift_range, cfg.shift_range + 1, size=2)
        frames = shift_frames(frames, int(a), int(b))
    if cfg.cutout_range and cfg.cutout_range[1] > 0:
        lo, hi = cfg.cutout_range
        length, height = (int(v) for v in rng.integers(max(lo, 1), hi + 1, size=2))
        length, height = min(length, w), min(height, h)
        x0 = int(rng.integers(0, w - length + 1))
        y0 = int(rng.integers(0, h - height + 1))
        frames = cutout(frames, x0, y0, length, height)
    return FrameSample(np.ascontiguousarray(frames), sample.label)


# -- synthetic gestures -------------------------------------------------------

def _sweep_events(rng: np.random.Generator, angle: float, width: int, height: int, duration: int,
                  rate: float, noise: float) -> np.ndarray:
    """A straight edge sweeping across the whole sensor along ``angle`` (0 = rightwards, pi/2 = upwards).

    Every pixel is crossed exactly once, so the time-collapsed histogram does not depend on the angle.
    """
    ux, uy = math.cos(angle), -math.sin(angle)
    ys, xs = np.mgrid[0:height, 0:width]
    proj = (xs + 0.5 - width / 2) * ux + (ys + 0.5 - height / 2) * uy
    lo, hi = proj.min(), proj.max()
    start = rng.uniform(0.0, 0.1) * duration
    span = rng.uniform(0.8, 0.9) * duration
    cross = start + (proj - lo) / max(hi - lo, 1e-9) * span

    counts = rng.poisson(rate, size=proj.shape).reshape(-1)
    px = np.repeat(xs.reshape(-1), counts)
    py = np.repeat(ys.reshape(-1), counts)
    jitter = span / max(width, height) * 0.5
    pt = np.repeat(cross.reshape(-1), counts) + rng.normal(0.0, jitter, size=px.size)

    n_noise = rng.poisson(noise * px.size)
    nx = rng.integers(0, width, n_noise)
    ny = rng.integers(0, height, n_noise)
    nt = rng.uniform(0, duration, n_noise)

    t = np.clip(np.concatenate([pt, nt]), 0, duration - 1).astype(np.uint64)
    x = np.concatenate([px, nx])
    y = np.concatenate([py, ny])
    p = rng.integers(0, 2, size=t.size)
    order = np.argsort(t, kind="stable")
    return make_events(t[order], x[order], y[order], p[order])


def gesture_angle(label: int, classes: int) -> float:
    return 2 * math.pi * label / classes


def synth_gesture_dataset(seed: int, classes: int, samples_per_class: int,
                          geometry: tuple[int, int] = (32, 32), duration: int = 1_000_000,
                          rate: float = 1.5, noise: float = 0.1) -> list[EventStream]:
    """Edge sweeps in ``classes`` evenly spaced directions, with per-sample angle/speed jitter.

    Random polarities and one crossing per pixel make the time-collapsed event
    histograms of all classes identical in distribution, so every class pair is
    separable only with temporal information. ``geometry`` is (width, height).
    """
    if classes < 2:
        raise ValueError(f"need at least two classes, got {classes}")
    width, height = geometry
    rng = np.random.default_rng(seed)
    spread = math.pi / classes / 3
    streams = []
    for label in range(classes):
        for _ in range(samples_per_class):
            angle = gesture_angle(label, classes) + rng.uniform(-spread, spread)
            events = _sweep_events(rng, angle, width, height, duration, rate, noise)
            streams.append(EventStream(width, height, events, label))
    return streams


def temporal_pairs(classes: int) -> list[tuple[int, int]]:
    """Class pairs whose time-collapsed histograms coincide; for the sweep generator, all of them."""
    return [(a, b) for a in range(classes) for b in range(a + 1, classes)]


def split_dataset(streams: Sequence[EventStream], test_fraction: float, seed: int
                  ) -> tuple[list[EventStream], list[EventStream]]:
    """Stratified split keeping class balance."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    labels = sorted({s.label for s in streams})
    for lab in labels:
        members = [s for s in streams if s.label == lab]
        idx = rng.permutation(len(members))
        n_test = int(round(len(members) * test_fraction))
        test += [members[i] for i in idx[:n_test]]
        train += [members[i] for i in idx[n_test:]]
    return train, test


def write_dataset(root: Union[str, Path], split: str, streams: Sequence[EventStream]) -> None:
    counters: dict[int, int] = {}
    for s in streams:
        if s.label is None:
            raise ValueError("dataset streams must be labelled")
        d = Path(root) / split / str(s.label)
        d.mkdir(parents=True, exist_ok=True)
        i = counters.get(s.label, 0)
        counters[s.label] = i + 1
        save_aer(s, d / f"{i:05d}.aer")


def read_dataset(root: Union[str, Path], split: str) -> list[EventStream]:
    base = Path(root) / split
    if not base.is_dir():
        raise FileNotFoundError(f"no split directory {base}")
    streams = []
    for class_dir in sorted(base.iterdir(), key=lambda p: (len(p.name), p.name)):
        if not class_dir.is_dir():
            continue
        label = int(class_dir.name)
        for f in sorted(class_dir.glob("*.aer")):
            s = load_aer(f)
            streams.append(replace(s, label=label) if s.label is None else s)
    return streams


def frames_for(streams: Sequence[EventStream], steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Bin every stream; returns (samples, T, 2, H, W) frames and integer labels."""
    samples = [bin_events(s, steps) for s in streams]
    frames = np.stack([s.frames for s in samples])
    labels = np.array([-1 if s.label is None else s.label for s in samples], dtype=np.int64)
    return frames, labels
