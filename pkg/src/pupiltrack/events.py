"""Event and label containers, file I/O and the sensor-to-network spatial transforms."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

SENSOR_WIDTH = 640
SENSOR_HEIGHT = 480
SQUARE_SIZE = 512
CROP_X_MIN = 96  # kept columns are [96, 607]
Y_SHIFT = 16

EVENTS_HEADER = ["t_us", "x", "y", "p"]
LABELS_HEADER = ["t_us", "x", "y"]

_BIN_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])


class DataError(ValueError):
    """Malformed or inconsistent event/label data."""


class Polarity(IntEnum):
    OFF = 0
    ON = 1


class Event(NamedTuple):
    t: int
    x: int
    y: int
    polarity: Polarity


class PupilLabel(NamedTuple):
    t: int
    x: float
    y: float


@dataclass(frozen=True, eq=False)
class EventStream:
    """Columnar, time-sorted event storage.

    Arrays are made read-only on construction; transforms always return a new stream.
    """

    width: int
    height: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        t = np.ascontiguousarray(self.t, dtype=np.int64)
        x = np.ascontiguousarray(self.x, dtype=np.int64)
        y = np.ascontiguousarray(self.y, dtype=np.int64)
        p = np.ascontiguousarray(self.p, dtype=np.uint8)
        if not (len(t) == len(x) == len(y) == len(p)):
            raise DataError("event columns have different lengths")
        if len(t):
            if (t < 0).any():
                raise DataError("negative timestamp")
            if (np.diff(t) < 0).any():
                raise DataError("events are not sorted by timestamp")
            _check_bounds(x, y, p, self.width, self.height)
        for name, arr in (("t", t), ("x", x), ("y", y), ("p", p)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def empty(cls, width: int, height: int) -> EventStream:
        z = np.zeros(0, dtype=np.int64)
        return cls(width, height, z, z, z, z)

    @classmethod
    def from_events(cls, events, width: int, height: int, sort: bool = True) -> EventStream:
        rows = np.array([(e[0], e[1], e[2], int(e[3])) for e in events], dtype=np.int64).reshape(-1, 4)
        if sort:
            rows = rows[np.argsort(rows[:, 0], kind="stable")]
        return cls(width, height, rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3])

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, index):
        if isinstance(index, slice):
            return EventStream(self.width, self.height, self.t[index], self.x[index], self.y[index], self.p[index])
        return Event(int(self.t[index]), int(self.x[index]), int(self.y[index]), Polarity(int(self.p[index])))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            (self.width, self.height) == (other.width, other.height)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    @property
    def resolution(self) -> tuple[int, int]:
        return self.width, self.height

    def mask(self, keep: np.ndarray) -> EventStream:
        return EventStream(self.width, self.height, self.t[keep], self.x[keep], self.y[keep], self.p[keep])


@dataclass(frozen=True, eq=False)
class LabelTrack:
    """Pupil labels as parallel arrays, strictly increasing in time."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        t = np.ascontiguousarray(self.t, dtype=np.int64)
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.float64)
        if not (len(t) == len(x) == len(y)):
            raise DataError("label columns have different lengths")
        if len(t) > 1 and (np.diff(t) <= 0).any():
            raise DataError("label timestamps must be strictly increasing")
        for name, arr in (("t", t), ("x", x), ("y", y)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def from_labels(cls, labels) -> LabelTrack:
        arr = np.array([tuple(lb) for lb in labels], dtype=np.float64).reshape(-1, 3)
        return cls(arr[:, 0].astype(np.int64), arr[:, 1], arr[:, 2])

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[PupilLabel]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, index):
        if isinstance(index, slice):
            return LabelTrack(self.t[index], self.x[index], self.y[index])
        return PupilLabel(int(self.t[index]), float(self.x[index]), float(self.y[index]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelTrack):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip((self.t, self.x, self.y), (other.t, other.x, other.y)))

    def check_within(self, width: int, height: int) -> None:
        bad = (self.x < 0) | (self.x >= width) | (self.y < 0) | (self.y >= height)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DataError(f"label {i} at ({self.x[i]}, {self.y[i]}) outside {width}x{height}")


@dataclass(frozen=True)
class Recording:
    stream: EventStream
    labels: LabelTrack

    def __post_init__(self):
        self.labels.check_within(self.stream.width, self.stream.height)


def _check_bounds(x, y, p, width, height, first_row: int = 0):
    bad_x = (x < 0) | (x >= width)
    if bad_x.any():
        i = int(np.flatnonzero(bad_x)[0])
        raise DataError(f"row {first_row + i}: x={x[i]} out of range for width {width}")
    bad_y = (y < 0) | (y >= height)
    if bad_y.any():
        i = int(np.flatnonzero(bad_y)[0])
        raise DataError(f"row {first_row + i}: y={y[i]} out of range for height {height}")
    bad_p = p > 1
    if bad_p.any():
        i = int(np.flatnonzero(bad_p)[0])
        raise DataError(f"row {first_row + i}: polarity {p[i]} not in {{0,1}}")


# ---------------------------------------------------------------------------
# file formats


def _parse_csv_rows(path: Path, header: list[str], n_fields: int, dtype) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None:
            return np.zeros((0, n_fields), dtype=dtype)
        if [c.strip() for c in first] != header:
            raise DataError(f"{path}: expected header {','.join(header)!r}, got {','.join(first)!r}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != n_fields:
                raise DataError(f"{path}:{lineno}: expected {n_fields} fields, got {len(row)}")
            try:
                rows.append([dtype(v) if dtype is float else int(v) for v in row])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric field in {row!r}") from None
    return np.array(rows, dtype=np.float64 if dtype is float else np.int64).reshape(-1, n_fields)


def load_events(path, format: str = "csv", width: int = SENSOR_WIDTH, height: int = SENSOR_HEIGHT) -> EventStream:
    """Read an event file.

    CSV files carry no resolution, so ``width``/``height`` declare it; the binary
    format stores its own resolution in the header and ignores the arguments.
    """
    path = Path(path)
    if format == "csv":
        rows = _parse_csv_rows(path, EVENTS_HEADER, 4, int)
        t, x, y, p = (rows[:, i] for i in range(4))
        if (p < 0).any():
            raise DataError(f"{path}: negative polarity")
    elif format == "bin":
        with open(path, "rb") as fh:
            try:
                header = json.loads(fh.readline())
                width, height, count = int(header["width"]), int(header["height"]), int(header["count"])
            except (ValueError, KeyError) as exc:
                raise DataError(f"{path}: bad binary header ({exc})") from None
            payload = fh.read()
        if len(payload) != count * _BIN_DTYPE.itemsize:
            raise DataError(f"{path}: expected {count} records, payload has {len(payload)} bytes")
        rec = np.frombuffer(payload, dtype=_BIN_DTYPE)
        t, x, y, p = (rec[f].astype(np.int64) for f in ("t", "x", "y", "p"))
    else:
        raise ValueError(f"unknown event format {format!r}")
    _check_bounds(x, y, p, width, height, first_row=2 if format == "csv" else 0)
    if len(t) > 1 and (np.diff(t) < 0).any():
        order = np.argsort(t, kind="stable")
        t, x, y, p = t[order], x[order], y[order], p[order]
    return EventStream(width, height, t, x, y, p)


def save_events(stream: EventStream, path, format: str = "csv") -> None:
    path = Path(path)
    if format == "csv":
        data = np.stack([stream.t, stream.x, stream.y, stream.p.astype(np.int64)], axis=1)
        with open(path, "w", newline="") as fh:
            fh.write(",".join(EVENTS_HEADER) + "\n")
            if len(data):
                np.savetxt(fh, data, fmt="%d", delimiter=",")
    elif format == "bin":
        rec = np.empty(len(stream), dtype=_BIN_DTYPE)
        rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
        header = {"width": stream.width, "height": stream.height, "count": len(stream)}
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode() + b"\n")
            fh.write(rec.tobytes())
    else:
        raise ValueError(f"unknown event format {format!r}")


def load_labels(path) -> LabelTrack:
    rows = _parse_csv_rows(Path(path), LABELS_HEADER, 3, float)
    t = rows[:, 0]
    if (t != np.round(t)).any():
        raise DataError(f"{path}: label timestamps must be integers")
    return LabelTrack(t.astype(np.int64), rows[:, 1], rows[:, 2])


def save_labels(labels: LabelTrack, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(LABELS_HEADER) + "\n")
        for t, x, y in zip(labels.t, labels.x, labels.y):
            fh.write(f"{int(t)},{float(x)!r},{float(y)!r}\n")


def load_recording(events_path, labels_path, format: str = "csv",
                   width: int = SENSOR_WIDTH, height: int = SENSOR_HEIGHT) -> Recording:
    return Recording(load_events(events_path, format, width, height), load_labels(labels_path))


# ---------------------------------------------------------------------------
# spatial transforms


def sensor_to_square(stream: EventStream, labels: LabelTrack | None = None):
    """Crop 640x480 sensor data to a 512x512 square.

    Columns 96..607 survive and shift left by 96; rows shift down by 16 so the
    480 rows sit in 16..495. Returns ``(stream, labels)``.
    """
    if stream.resolution != (SENSOR_WIDTH, SENSOR_HEIGHT):
        raise DataError(f"expected {SENSOR_WIDTH}x{SENSOR_HEIGHT} input, got {stream.width}x{stream.height}")
    keep = (stream.x >= CROP_X_MIN) & (stream.x < CROP_X_MIN + SQUARE_SIZE)
    out = EventStream(
        SQUARE_SIZE, SQUARE_SIZE,
        stream.t[keep], stream.x[keep] - CROP_X_MIN, stream.y[keep] + Y_SHIFT, stream.p[keep],
    )
    new_labels = None
    if labels is not None:
        new_labels = LabelTrack(labels.t, labels.x - CROP_X_MIN, labels.y + Y_SHIFT)
        new_labels.check_within(SQUARE_SIZE, SQUARE_SIZE)
    return out, new_labels


def sum_pool_events(stream: EventStream, factor: int) -> EventStream:
    if factor < 1:
        raise ValueError("pooling factor must be positive")
    if stream.width % factor or stream.height % factor:
        raise DataError(f"factor {factor} does not divide {stream.width}x{stream.height}")
    return EventStream(
        stream.width // factor, stream.height // factor,
        stream.t, stream.x // factor, stream.y // factor, stream.p,
    )


def pool_labels(labels: LabelTrack, factor: int) -> LabelTrack:
    return LabelTrack(labels.t, labels.x / factor, labels.y / factor)


def prepare_recording(rec: Recording, factor: int = 8) -> Recording:
    """Sensor recording -> network resolution (512x512 crop, then sum pooling)."""
    stream, labels = sensor_to_square(rec.stream, rec.labels)
    return Recording(sum_pool_events(stream, factor), pool_labels(labels, factor))


def crop_recording(rec: Recording, t_start: int, t_end: int) -> Recording:
    """Events and labels with ``t_start <= t < t_end``."""
    s = rec.stream
    lo, hi = np.searchsorted(s.t, [t_start, t_end], side="left")
    llo, lhi = np.searchsorted(rec.labels.t, [t_start, t_end], side="left")
    return Recording(s[lo:hi], rec.labels[llo:lhi])


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class Summary:
    median: float
    mean: float
    std: float
    min: float
    max: float

    @classmethod
    def of(cls, values) -> Summary:
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            return cls(*(float("nan"),) * 5)
        return cls(float(np.median(v)), float(v.mean()), float(v.std()), float(v.min()), float(v.max()))


@dataclass(frozen=True)
class StatsReport:
    sampling_time: Summary
    events_per_timestamp: Summary
    events_per_label_period: Summary
    num_events: int
    duration_us: int

    def rows(self):
        return [
            ("Sampling Time (us)", self.sampling_time),
            ("Events / Ts", self.events_per_timestamp),
            ("Events / label period", self.events_per_label_period),
        ]

    def format(self) -> str:
        lines = [f"{'Name':<24}{'Median':>10}{'Mean':>10}{'Std':>10}{'Min':>10}{'Max':>10}"]
        for name, s in self.rows():
            lines.append(f"{name:<24}{s.median:>10.1f}{s.mean:>10.1f}{s.std:>10.1f}{s.min:>10.1f}{s.max:>10.1f}")
        lines.append(f"events={self.num_events} duration_us={self.duration_us}")
        return "\n".join(lines)


def stream_stats(stream: EventStream, label_period: int = 30_000) -> StatsReport:
    """Gap and per-timestamp count statistics (population std)."""
    if len(stream) == 0:
        raise DataError("cannot compute statistics of an empty stream")
    if label_period <= 0:
        raise ValueError("label_period must be positive")
    uniq, counts = np.unique(stream.t, return_counts=True)
    t0 = int(stream.t[0])
    per_period = np.bincount((stream.t - t0) // label_period)
    return StatsReport(
        sampling_time=Summary.of(np.diff(uniq)),
        events_per_timestamp=Summary.of(counts),
        events_per_label_period=Summary.of(per_period),
        num_events=len(stream),
        duration_us=int(stream.t[-1] - t0),
    )
