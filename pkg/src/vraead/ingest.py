"""Meter CSV parsing, hourly alignment, sliding windows and chronological splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

MISSING_TOKENS = frozenset({"", "nan", "null", "none", "na"})
HOUR = 3600


class IngestError(ValueError):
    """A row of an input file could not be parsed."""


class SchemaError(ValueError):
    """Input file header does not match the expected schema."""


class WindowSizeError(ValueError):
    """Not enough data for the requested window / split."""


@dataclass
class CsvSchema:
    timestamp_column: str = "timestamp"
    channels: Sequence[str] | None = None   # None: every other column except label/missing columns
    timestamp_format: str = "iso"           # "iso" or "epoch"
    label_column: str | None = None


@dataclass
class RawSeries:
    timestamps: np.ndarray          # epoch seconds, strictly increasing
    channels: list[str]
    values: np.ndarray              # (T, n), NaN = missing
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.values.shape != (len(self.timestamps), len(self.channels)):
            raise SchemaError(f"values {self.values.shape} do not match "
                              f"{len(self.timestamps)} timestamps x {len(self.channels)} channels")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise IngestError("timestamps must be strictly increasing")


@dataclass
class AlignedFrame:
    start_hour: int                 # epoch hour of row 0
    channels: list[str]
    values: np.ndarray              # (T, n); NaN where missing
    missing_mask: np.ndarray | None = None
    filled_mask: np.ndarray | None = None   # entries zero-filled by preprocessing
    labels: np.ndarray | None = None        # optional ground-truth labels (T,)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.missing_mask is None:
            self.missing_mask = np.isnan(self.values)
        if self.filled_mask is None:
            self.filled_mask = np.zeros(self.values.shape, dtype=bool)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def timestamps(self) -> np.ndarray:
        return (self.start_hour + np.arange(self.T)) * HOUR

    def copy(self) -> "AlignedFrame":
        return AlignedFrame(self.start_hour, list(self.channels), self.values.copy(),
                            self.missing_mask.copy(), self.filled_mask.copy(),
                            None if self.labels is None else self.labels.copy())


@dataclass
class WindowBatch:
    windows: np.ndarray             # (B, W, n)
    beta: np.ndarray                # (B, W) in {0, 1}
    labels: np.ndarray              # (B, W) bool
    origin: np.ndarray              # (B, 2): series id, start index
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.windows.shape[0]

    @property
    def W(self) -> int:
        return self.windows.shape[1]

    def subset(self, idx) -> "WindowBatch":
        return WindowBatch(self.windows[idx], self.beta[idx], self.labels[idx], self.origin[idx])


# -- parsing ----------------------------------------------------------------

def parse_timestamp(text: str, fmt: str) -> float:
    text = text.strip()
    if fmt == "epoch":
        return float(text)
    if fmt != "iso":
        raise ValueError(f"unknown timestamp format {fmt!r}")
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def format_timestamp(epoch: float) -> str:
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%S")


def _parse_value(cell: str) -> float:
    if cell.strip().lower() in MISSING_TOKENS:
        return math.nan
    return float(cell)


def parse_csv(path: str | Path, schema: CsvSchema | None = None) -> RawSeries:
    """Read a meter CSV into a RawSeries.

    Missing tokens become NaN, rows are sorted by time and rows sharing a
    timestamp are merged by averaging each channel's present values.
    """
    schema = schema or CsvSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if schema.timestamp_column not in header:
            raise SchemaError(f"{path}: missing required column {schema.timestamp_column!r}")
        if schema.channels is None:
            skip = {schema.timestamp_column, schema.label_column}
            channels = [h for h in header if h not in skip and not h.endswith("_missing")
                        and h not in ("label", "beta", "reason")]
        else:
            channels = list(schema.channels)
            absent = [c for c in channels + ([schema.label_column] if schema.label_column else [])
                      if c not in header]
            if absent:
                raise SchemaError(f"{path}: missing required column(s) {absent}")
        ts_i = header.index(schema.timestamp_column)
        ch_i = [header.index(c) for c in channels]
        lab_i = header.index(schema.label_column) if schema.label_column in header else None
        stamps, rows, labels = [], [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                stamps.append(parse_timestamp(row[ts_i], schema.timestamp_format))
            except (ValueError, IndexError) as exc:
                raise IngestError(f"{path}:{line_no}: unparseable timestamp "
                                  f"{row[ts_i] if ts_i < len(row) else ''!r}") from exc
            try:
                rows.append([_parse_value(row[i]) for i in ch_i])
            except (ValueError, IndexError) as exc:
                raise IngestError(f"{path}:{line_no}: bad value ({exc})") from exc
            if lab_i is not None:
                lab_v = _parse_value(row[lab_i]) if lab_i < len(row) else math.nan
                labels.append(0.0 if math.isnan(lab_v) else lab_v)
    ts = np.asarray(stamps, dtype=np.float64)
    vals = np.asarray(rows, dtype=np.float64).reshape(len(stamps), len(channels))
    lab = np.asarray(labels) if lab_i is not None else None
    order = np.argsort(ts, kind="stable")
    ts, vals = ts[order], vals[order]
    lab = None if lab is None else lab[order]
    uniq, inverse = np.unique(ts, return_inverse=True)
    if len(uniq) != len(ts):
        vals = _group_nanmean(vals, inverse, len(uniq))
        lab = None if lab is None else np.maximum.reduceat(lab, np.r_[0, np.flatnonzero(np.diff(ts)) + 1])
        ts = uniq
    return RawSeries(ts, channels, vals, None if lab is None else lab.astype(bool))


def _group_nanmean(vals: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    present = ~np.isnan(vals)
    sums = np.zeros((n_groups, vals.shape[1]))
    counts = np.zeros((n_groups, vals.shape[1]))
    np.add.at(sums, groups, np.where(present, vals, 0.0))
    np.add.at(counts, groups, present)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


# -- alignment --------------------------------------------------------------

def align_hourly(raw: RawSeries) -> AlignedFrame:
    """Hourly means over [h, h+1); hours without readings become missing."""
    if len(raw.timestamps) == 0:
        raise WindowSizeError("align_hourly: no readings")
    hours = np.floor(raw.timestamps / HOUR).astype(np.int64)
    start = int(hours[0])
    T = int(hours[-1]) - start + 1
    values = _group_nanmean(raw.values, hours - start, T)
    labels = None
    if raw.labels is not None:
        labels = np.zeros(T, dtype=bool)
        np.logical_or.at(labels, hours - start, raw.labels)
    return AlignedFrame(start, list(raw.channels), values, labels=labels)


def frame_from_array(values: np.ndarray, start_hour: int = 0, channels=None, labels=None) -> AlignedFrame:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    channels = channels or [f"x{i}" for i in range(values.shape[1])]
    return AlignedFrame(start_hour, list(channels), values,
                        labels=None if labels is None else np.asarray(labels, dtype=bool))


def write_frame_csv(frame: AlignedFrame, path: str | Path, beta=None, labels=None, reasons=None) -> None:
    """Write an aligned frame; each channel gets a ``<name>_missing`` column."""
    header = ["timestamp"]
    for c in frame.channels:
        header += [c, f"{c}_missing"]
    extra = [("beta", beta), ("label", labels if labels is not None else frame.labels), ("reason", reasons)]
    extra = [(k, v) for k, v in extra if v is not None]
    header += [k for k, _ in extra]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, ts in enumerate(frame.timestamps):
            row = [format_timestamp(ts)]
            for j in range(frame.n):
                miss = bool(frame.missing_mask[t, j])
                row += ["" if miss else repr(float(frame.values[t, j])), int(miss)]
            for k, v in extra:
                item = v[t]
                row.append(item if isinstance(item, str) else int(item))
            w.writerow(row)


def read_frame_csv(path: str | Path) -> tuple[AlignedFrame, dict[str, np.ndarray]]:
    """Inverse of :func:`write_frame_csv`; returns the frame and any extra columns."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or "timestamp" not in rows[0]:
        raise SchemaError(f"{path}: missing required column 'timestamp'")
    header, body = rows[0], rows[1:]
    schema = CsvSchema(channels=None)
    raw = parse_csv(path, schema)
    frame = align_hourly(raw)
    extras = {}
    for name in ("beta", "label", "reason"):
        if name in header:
            i = header.index(name)
            col = [r[i] for r in body]
            extras[name] = np.array(col) if name == "reason" else np.array([float(v) for v in col])
    if "label" in extras and len(extras["label"]) == frame.T:
        frame.labels = extras["label"].astype(bool)
    return frame, extras


# -- windows and splits -----------------------------------------------------

def slide_windows(frame: AlignedFrame | np.ndarray, W: int, stride: int = 1, beta=None, labels=None,
                  series_id: int = 0) -> WindowBatch:
    values = frame.values if isinstance(frame, AlignedFrame) else np.asarray(frame, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    T = values.shape[0]
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if T < W:
        raise WindowSizeError(f"series length T={T} is shorter than window W={W}")
    beta = np.ones(T) if beta is None else np.asarray(beta, dtype=np.float64)
    labels = np.zeros(T, dtype=bool) if labels is None else np.asarray(labels, dtype=bool)
    starts = np.arange(0, T - W + 1, stride)
    idx = starts[:, None] + np.arange(W)[None, :]
    origin = np.stack([np.full(len(starts), series_id), starts], axis=1)
    return WindowBatch(values[idx].copy(), beta[idx].copy(), labels[idx].copy(), origin)


def split(batch: WindowBatch, ratios: Sequence[float] = (75, 15, 10), gap: int = 0
          ) -> tuple[WindowBatch, WindowBatch, WindowBatch]:
    """Chronological train/val/test split.

    Validation and test get floor(B * r) windows (at least one each); the
    remainder goes to train. ``gap`` drops that many windows from the end of
    train and of validation so overlapping windows do not straddle splits.
    """
    if abs(sum(ratios) - 100) > 1e-9:
        raise ValueError(f"split ratios must sum to 100, got {ratios}")
    B = len(batch)
    if B < 3:
        raise WindowSizeError(f"need at least 3 windows to split, got {B}")
    n_val = max(1, int(math.floor(B * ratios[1] / 100)))
    n_test = max(1, int(math.floor(B * ratios[2] / 100)))
    n_train = B - n_val - n_test
    if n_train < 1 or n_train - gap < 1 or n_val - gap < 1:
        raise WindowSizeError(f"{B} windows are too few for ratios {ratios} with gap {gap}")
    tr = np.arange(0, n_train - gap)
    va = np.arange(n_train, n_train + n_val - gap)
    te = np.arange(n_train + n_val, B)
    return batch.subset(tr), batch.subset(va), batch.subset(te)
