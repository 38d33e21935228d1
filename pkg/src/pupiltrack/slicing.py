"""Turn a recording into the T x 2 x H x W binary frame tensor fed to the network.

Two windowing modes: fixed wall-clock bins, or dynamic bins that close once a
given number of distinct pixels has fired. Both fill bins backwards in time
from a pupil-label timestamp.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .events import EventStream, LabelTrack, PupilLabel, Recording

OFF_CHANNEL = 0
ON_CHANNEL = 1


@dataclass(frozen=True)
class SliceConfig:
    mode: str = "dynamic"
    dt_us: int | None = None
    n_events: int | None = 300
    num_bins: int = 64
    height: int = 64
    width: int = 64

    def __post_init__(self):
        if self.mode == "fixed":
            if self.dt_us is None or self.dt_us <= 0:
                raise ValueError("fixed slicing needs dt_us > 0")
        elif self.mode == "dynamic":
            if self.n_events is None or self.n_events < 1:
                raise ValueError("dynamic slicing needs n_events >= 1")
        else:
            raise ValueError(f"unknown slicing mode {self.mode!r}")
        if self.num_bins < 1:
            raise ValueError("num_bins must be >= 1")

    @classmethod
    def fixed(cls, dt_us: int, **kw) -> SliceConfig:
        return cls(mode="fixed", dt_us=dt_us, n_events=None, **kw)

    @classmethod
    def dynamic(cls, n_events: int, **kw) -> SliceConfig:
        return cls(mode="dynamic", dt_us=None, n_events=n_events, **kw)


@dataclass
class EventFrameSequence:
    frames: np.ndarray  # (T, 2, H, W) uint8, channel 0 = OFF, 1 = ON
    bin_end_times: np.ndarray  # (T,) int64
    labels: np.ndarray  # (T, 2) float64, (x, y) in frame pixels
    padded_bins: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def num_bins(self) -> int:
        return self.frames.shape[0]

    def active_pixels(self) -> np.ndarray:
        """Per-bin number of pixels with either polarity set."""
        return self.frames.any(axis=1).sum(axis=(1, 2))

    def save(self, path) -> None:
        header = {
            "shape": list(self.frames.shape),
            "bin_end_times": [int(t) for t in self.bin_end_times],
            "labels": [[float(x), float(y)] for x, y in self.labels],
            "padded_bins": int(self.padded_bins),
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode() + b"\n")
            fh.write(np.ascontiguousarray(self.frames, dtype=np.uint8).tobytes())

    @classmethod
    def load(cls, path) -> EventFrameSequence:
        with open(Path(path), "rb") as fh:
            header = json.loads(fh.readline())
            payload = fh.read()
        shape = tuple(header["shape"])
        frames = np.frombuffer(payload, dtype=np.uint8)
        if frames.size != int(np.prod(shape)):
            raise ValueError(f"{path}: payload size {frames.size} does not match shape {shape}")
        return cls(
            frames.reshape(shape).copy(),
            np.asarray(header["bin_end_times"], dtype=np.int64),
            np.asarray(header["labels"], dtype=np.float64).reshape(-1, 2),
            int(header.get("padded_bins", 0)),
        )


def resolve_polarity(on_count, off_count):
    """Keep the majority polarity per pixel; ties go to ON. Returns ``(on_bit, off_bit)``."""
    on_count = np.asarray(on_count)
    off_count = np.asarray(off_count)
    on_bit = ((on_count > 0) & (on_count >= off_count)).astype(np.uint8)
    off_bit = ((off_count > 0) & (on_count < off_count)).astype(np.uint8)
    return on_bit, off_bit


def interpolate_label(labels: LabelTrack, t) -> PupilLabel:
    if len(labels) == 0:
        raise ValueError("need at least one label to interpolate")
    x, y = interpolate_labels(labels, np.asarray([t]))[0]
    return PupilLabel(int(t), float(x), float(y))


def interpolate_labels(labels: LabelTrack, times) -> np.ndarray:
    """Linear interpolation between bracketing labels, clamped at both ends. Returns (n, 2)."""
    if len(labels) == 0:
        raise ValueError("need at least one label to interpolate")
    times = np.asarray(times, dtype=np.float64)
    return np.stack([np.interp(times, labels.t, labels.x), np.interp(times, labels.t, labels.y)], axis=-1)


def _frame_from_window(pix, pol, height, width) -> np.ndarray:
    hw = height * width
    counts = np.bincount(pol.astype(np.int64) * hw + pix, minlength=2 * hw).reshape(2, height, width)
    on_bit, off_bit = resolve_polarity(counts[ON_CHANNEL], counts[OFF_CHANNEL])
    frame = np.empty((2, height, width), dtype=np.uint8)
    frame[OFF_CHANNEL] = off_bit
    frame[ON_CHANNEL] = on_bit
    return frame


def _check_resolution(stream: EventStream, cfg: SliceConfig):
    if (stream.width, stream.height) != (cfg.width, cfg.height):
        raise ValueError(
            f"stream is {stream.width}x{stream.height}, slicer expects {cfg.width}x{cfg.height}"
        )


def _anchor_time(rec: Recording, anchor_label_index: int) -> int:
    if len(rec.labels) == 0:
        raise ValueError("recording has no labels")
    return int(rec.labels.t[anchor_label_index])


def dynamic_window_start(pix: np.ndarray, end: int, n: int) -> int | None:
    """Start index of the longest window ``pix[start:end]`` touching exactly ``n`` distinct pixels.

    Returns None when fewer than ``n`` distinct pixels exist in ``pix[:end]``.
    """
    length = min(end, 4 * n)
    while True:
        chunk = pix[end - length:end][::-1]
        _, first = np.unique(chunk, return_index=True)
        if len(first) > n:
            # scanning backwards, the (n+1)-th distinct pixel first shows up here
            return end - int(np.partition(first, n)[n])
        if length == end:
            return 0 if len(first) == n else None
        length = min(end, 2 * length)


def _finalize_times(ends: list[int], n_real: int, num_bins: int) -> np.ndarray:
    """Make bin end times strictly increasing, extrapolating padded (earliest) bins."""
    out = np.zeros(num_bins, dtype=np.int64)
    real = np.asarray(ends[::-1], dtype=np.int64)  # oldest first
    out[num_bins - n_real:] = real
    for i in range(num_bins - 2, num_bins - n_real - 1, -1):
        out[i] = min(out[i], out[i + 1] - 1)
    if n_real < num_bins:
        step = 1
        if n_real >= 2:
            step = max(1, int(round((out[-1] - out[num_bins - n_real]) / (n_real - 1))))
        first = out[num_bins - n_real] if n_real else 0
        k = np.arange(num_bins - n_real, 0, -1)
        out[: num_bins - n_real] = first - k * step
    return out


def slice_dynamic(rec: Recording, cfg: SliceConfig, anchor_label_index: int = -1) -> EventFrameSequence:
    """Fill ``cfg.num_bins`` bins backwards from a label, each touching exactly ``cfg.n_events`` pixels.

    A bin extends back over every event whose pixel is already among its
    ``n`` pixels, so the event count per bin can exceed ``n``. Once fewer than
    ``n`` distinct pixels remain the earliest bins stay empty and are counted
    in ``padded_bins``.
    """
    if cfg.mode != "dynamic":
        raise ValueError("slice_dynamic needs a dynamic SliceConfig")
    stream = rec.stream
    _check_resolution(stream, cfg)
    anchor = _anchor_time(rec, anchor_label_index)
    h, w, n, T = cfg.height, cfg.width, cfg.n_events, cfg.num_bins
    end = int(np.searchsorted(stream.t, anchor, side="right"))
    pix = stream.y[:end] * w + stream.x[:end]
    pol = stream.p[:end]

    frames = np.zeros((T, 2, h, w), dtype=np.uint8)
    ends: list[int] = []
    for i in reversed(range(T)):
        start = dynamic_window_start(pix, end, n)
        if start is None:
            break
        frames[i] = _frame_from_window(pix[start:end], pol[start:end], h, w)
        ends.append(int(stream.t[end - 1]))
        end = start
    n_real = len(ends)
    times = _finalize_times(ends, n_real, T)
    return EventFrameSequence(
        frames, times, interpolate_labels(rec.labels, times), padded_bins=T - n_real,
        meta={"mode": "dynamic", "n_events": n, "anchor_t": anchor},
    )


def slice_fixed(rec: Recording, cfg: SliceConfig, anchor_label_index: int = -1) -> EventFrameSequence:
    """Bins of ``dt_us`` ending at the anchor label: bin i covers ``(end_i - dt, end_i]``."""
    if cfg.mode != "fixed":
        raise ValueError("slice_fixed needs a fixed SliceConfig")
    stream = rec.stream
    _check_resolution(stream, cfg)
    anchor = _anchor_time(rec, anchor_label_index)
    h, w, dt, T = cfg.height, cfg.width, cfg.dt_us, cfg.num_bins
    ends = anchor - dt * np.arange(T - 1, -1, -1, dtype=np.int64)
    bounds = np.searchsorted(stream.t, np.concatenate([[ends[0] - dt], ends]), side="right")
    pix = stream.y * w + stream.x
    frames = np.zeros((T, 2, h, w), dtype=np.uint8)
    for i in range(T):
        lo, hi = bounds[i], bounds[i + 1]
        if hi > lo:
            frames[i] = _frame_from_window(pix[lo:hi], stream.p[lo:hi], h, w)
    # bins that close before the first recorded event carry no data
    padded = T if len(stream) == 0 else int((ends < stream.t[0]).sum())
    return EventFrameSequence(
        frames, ends, interpolate_labels(rec.labels, ends), padded_bins=padded,
        meta={"mode": "fixed", "dt_us": dt, "anchor_t": anchor},
    )


def slice_recording(rec: Recording, cfg: SliceConfig, anchor_label_index: int = -1) -> EventFrameSequence:
    if cfg.mode == "dynamic":
        return slice_dynamic(rec, cfg, anchor_label_index)
    return slice_fixed(rec, cfg, anchor_label_index)


def slice_all(rec: Recording, cfg: SliceConfig, anchors=None, min_real_bins: int | None = None):
    """Slice at several anchor labels, skipping sequences with fewer than ``min_real_bins`` filled bins."""
    anchors = range(len(rec.labels)) if anchors is None else anchors
    out = []
    for a in anchors:
        seq = slice_recording(rec, cfg, a)
        if min_real_bins is not None and seq.num_bins - seq.padded_bins < min_real_bins:
            continue
        seq.meta["anchor_index"] = int(a)
        out.append(seq)
    return out
