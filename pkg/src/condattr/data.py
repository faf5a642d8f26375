"""Time-series containers, z-score normalization, windowing and sensor masking."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class DataError(ValueError):
    """Malformed input data or an invariant violation on a dataset."""


class LeakageError(DataError):
    """A normal-only range intersects a labeled anomaly event."""


@dataclass(frozen=True)
class SeriesMatrix:
    values: np.ndarray
    sensor_names: tuple[str, ...]
    timestamps: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise DataError(f"series must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            r, c = np.argwhere(~np.isfinite(values))[0]
            raise DataError(f"non-finite value at row {r}, column {c}")
        if len(self.sensor_names) != values.shape[1]:
            raise DataError(
                f"{len(self.sensor_names)} sensor names for {values.shape[1]} columns")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "sensor_names", tuple(self.sensor_names))
        if self.timestamps is not None:
            ts = np.asarray(self.timestamps, dtype=np.int64)
            if ts.shape != (values.shape[0],):
                raise DataError("timestamps length differs from row count")
            if ts.size > 1 and np.any(np.diff(ts) <= 0):
                raise DataError("timestamps must be strictly increasing")
            ts.setflags(write=False)
            object.__setattr__(self, "timestamps", ts)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "SeriesMatrix":
        return SeriesMatrix(values, self.sensor_names, self.timestamps)

    def sensor_index(self, name: str) -> int:
        try:
            return self.sensor_names.index(name)
        except ValueError:
            raise DataError(f"unknown sensor {name!r}") from None


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    constant_mask: np.ndarray

    @property
    def d(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class Window:
    start: int
    data: np.ndarray

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def end(self) -> int:
        """Exclusive end index in the parent series."""
        return self.start + self.data.shape[0]


@dataclass(frozen=True)
class MaskedContext:
    base: Window
    masked_sensor: int
    representation: np.ndarray


@dataclass(frozen=True)
class AnomalyEvent:
    onset: int
    duration: int
    ground_truth: frozenset

    def __post_init__(self):
        if self.duration < 1:
            raise DataError("event duration must be >= 1")
        if not self.ground_truth:
            raise DataError("event needs at least one ground-truth sensor")
        object.__setattr__(self, "ground_truth", frozenset(int(j) for j in self.ground_truth))

    @property
    def end(self) -> int:
        return self.onset + self.duration

    def overlaps(self, start: int, stop: int) -> bool:
        return self.onset < stop and start < self.end


@dataclass(frozen=True)
class LabeledDataset:
    series: SeriesMatrix
    events: tuple = ()
    train_range: tuple[int, int] = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        lo, hi = self.train_range
        if not 0 <= lo < hi <= self.series.T:
            raise DataError(f"train_range {self.train_range} outside [0, {self.series.T})")
        for ev in self.events:
            if ev.onset < 0 or ev.end > self.series.T:
                raise DataError(f"event at {ev.onset} (+{ev.duration}) outside series")
            bad = [j for j in ev.ground_truth if not 0 <= j < self.series.d]
            if bad:
                raise DataError(f"event at {ev.onset} names unknown sensors {bad}")
        self.assert_normal_range(lo, hi)

    def assert_normal_range(self, lo: int, hi: int) -> None:
        for ev in self.events:
            if ev.overlaps(lo, hi):
                raise LeakageError(
                    f"range [{lo}, {hi}) intersects event [{ev.onset}, {ev.end})")


# --------------------------------------------------------------------------- I/O

def load_csv(path, has_timestamp: bool = False) -> SeriesMatrix:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if has_timestamp:
            if not header or header[0] != "timestamp":
                raise DataError(f"{path}: first column must be 'timestamp'")
            names = header[1:]
        else:
            names = header
        if not names:
            raise DataError(f"{path}: no sensor columns")
        rows, stamps = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            if has_timestamp:
                try:
                    stamps.append(int(row[0]))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad timestamp {row[0]!r}") from None
                row = row[1:]
            vals = []
            for col, cell in zip(names, row):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}:{lineno}: non-numeric cell {cell!r} in column {col!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}:{lineno}: non-finite value in column {col!r}")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return SeriesMatrix(np.array(rows, dtype=float), tuple(names),
                        np.array(stamps, dtype=np.int64) if has_timestamp else None)


def save_csv(series: SeriesMatrix, path, digits: int = 17) -> None:
    """Write ``series`` as CSV; ``digits`` significant digits (17 is lossless)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    fmt = f"{{:.{digits}g}}"
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        header = list(series.sensor_names)
        if series.timestamps is not None:
            header = ["timestamp"] + header
        w.writerow(header)
        for t in range(series.T):
            row = [fmt.format(v) for v in series.values[t]]
            if series.timestamps is not None:
                row = [str(int(series.timestamps[t]))] + row
            w.writerow(row)
    tmp.replace(path)


def load_labels(path, series: SeriesMatrix) -> list[AnomalyEvent]:
    with Path(path).open(encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise DataError("labels file must hold a JSON array")
    events = []
    for i, item in enumerate(raw):
        try:
            sensors = frozenset(series.sensor_index(s) for s in item["sensors"])
            events.append(AnomalyEvent(int(item["onset"]), int(item["duration"]), sensors))
        except KeyError as exc:
            raise DataError(f"label {i}: missing field {exc}") from None
    return events


def labels_to_json(events: Sequence[AnomalyEvent], sensor_names: Sequence[str]) -> list[dict]:
    return [{"onset": ev.onset, "duration": ev.duration,
             "sensors": [sensor_names[j] for j in sorted(ev.ground_truth)]}
            for ev in events]


def write_text_atomic(path, text: str) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def save_labels(events, sensor_names, path) -> None:
    write_text_atomic(path, json.dumps(labels_to_json(events, sensor_names), indent=1))


# ----------------------------------------------------------------- normalization

def fit_normalization(series: SeriesMatrix, range_: tuple[int, int] | None = None,
                      std_floor: float = 1e-8) -> NormalizationStats:
    lo, hi = range_ if range_ is not None else (0, series.T)
    if not 0 <= lo < hi <= series.T:
        raise DataError(f"empty or out-of-bounds normalization range [{lo}, {hi})")
    if std_floor <= 0:
        raise DataError("std_floor must be positive")
    block = series.values[lo:hi]
    mean = block.mean(axis=0)
    std = block.std(axis=0)  # population convention
    constant = std < std_floor
    std = np.where(constant, 1.0, std)
    return NormalizationStats(mean, std, constant)


def apply_normalization(series: SeriesMatrix, stats: NormalizationStats) -> SeriesMatrix:
    if stats.d != series.d:
        raise DataError(f"stats for {stats.d} sensors applied to {series.d}")
    return series.with_values((series.values - stats.mean) / stats.std)


def invert_normalization(series: SeriesMatrix, stats: NormalizationStats) -> SeriesMatrix:
    if stats.d != series.d:
        raise DataError(f"stats for {stats.d} sensors applied to {series.d}")
    return series.with_values(series.values * stats.std + stats.mean)


# ----------------------------------------------------------------------- windows

def window_at(series: SeriesMatrix, start: int, w: int) -> Window:
    if start < 0 or start + w > series.T:
        raise DataError(f"window [{start}, {start + w}) outside series of length {series.T}")
    return Window(start, series.values[start:start + w])


def window_starts(T: int, w: int, stride: int = 1, lo: int = 0) -> np.ndarray:
    if w < 1 or stride < 1:
        raise DataError("window length and stride must be >= 1")
    if w > T - lo:
        raise DataError(f"window length {w} exceeds series length {T - lo}")
    return np.arange(lo, T - w + 1, stride)


def sliding_windows(series: SeriesMatrix, w: int, stride: int = 1) -> list[Window]:
    return [Window(int(s), series.values[s:s + w]) for s in window_starts(series.T, w, stride)]


def stack_windows(series: SeriesMatrix, starts, w: int) -> np.ndarray:
    """Return an (n, w, d) array of windows at the given starts (a copy)."""
    starts = np.asarray(starts, dtype=np.int64)
    view = np.lib.stride_tricks.sliding_window_view(series.values, w, axis=0)
    # sliding_window_view puts the window axis last: (T-w+1, d, w)
    return np.ascontiguousarray(view[starts].transpose(0, 2, 1))


def mask_sensor(window: Window, j: int) -> MaskedContext:
    d = window.data.shape[1]
    if not 0 <= j < d:
        raise DataError(f"sensor index {j} out of range for d={d}")
    rep = window.data.copy()
    rep[:, j] = 0.0
    return MaskedContext(window, j, rep)


def windows_of_event(dataset: LabeledDataset | SeriesMatrix, event: AnomalyEvent, w: int,
                     stride: int = 1) -> list[Window]:
    """Windows intersecting the event interval (a window is anomalous iff it does)."""
    series = dataset.series if isinstance(dataset, LabeledDataset) else dataset
    return [Window(int(s), series.values[s:s + w])
            for s in window_starts(series.T, w, stride) if event.overlaps(s, s + w)]
