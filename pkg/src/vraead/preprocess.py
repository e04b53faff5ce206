"""Missing-value triage and histogram-based global-anomaly pre-labelling.

Single missing points (both temporal neighbours present) are linearly
interpolated and stay trainable. Runs of missing points, and gaps touching
either end of the series, are zero-filled and labelled. A per-dimension
equal-width histogram then scores every timestamp and the top fraction is
labelled as global anomalies. Labelled timestamps get beta = 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import ContractError, ShapeError
from .ingest import AlignedFrame, format_timestamp


@dataclass
class HistogramModel:
    k: int
    edges: list[np.ndarray]          # per dimension, k + 1 edges
    freqs: list[np.ndarray]          # per dimension, k relative frequencies
    constant_dims: list[int] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.edges)


@dataclass
class PreLabelReport:
    global_anomaly_indices: list[tuple[int, int]]   # (t, dim) of the most unusual bin per labelled t
    global_timestamps: np.ndarray                   # sorted t labelled global
    filled_single: list[int]
    zero_filled_runs: list[tuple[int, int]]        # (start, length), per timestamp
    scores: np.ndarray
    labels: np.ndarray                              # (T,) bool, all reasons
    beta: np.ndarray                                # (T,) float
    reasons: np.ndarray                             # "", "global" or "missing-run"
    constant_dims: list[int] = field(default_factory=list)

    def to_csv(self, path: str | Path, timestamps: np.ndarray | None = None) -> None:
        T = len(self.scores)
        stamps = timestamps if timestamps is not None else np.arange(T)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp", "score", "label", "reason"])
            for t in range(T):
                ts = format_timestamp(stamps[t]) if timestamps is not None else int(stamps[t])
                w.writerow([ts, repr(float(self.scores[t])), int(self.labels[t]), self.reasons[t]])


# -- missing values -----------------------------------------------------------

def classify_missing(frame: AlignedFrame) -> tuple[list[tuple[int, int]], list[tuple[int, int, int]]]:
    """Split missing entries into singles (t, dim) and runs (t0, length, dim)."""
    singles, runs = [], []
    T = frame.T
    for d in range(frame.n):
        miss = frame.missing_mask[:, d]
        t = 0
        while t < T:
            if not miss[t]:
                t += 1
                continue
            t0 = t
            while t < T and miss[t]:
                t += 1
            length = t - t0
            if length == 1 and t0 > 0 and t < T:
                singles.append((t0, d))
            else:
                runs.append((t0, length, d))
    return singles, runs


def interpolate_singles(frame: AlignedFrame, singles) -> AlignedFrame:
    out = frame.copy()
    for t, d in singles:
        if t == 0 or t == frame.T - 1 or frame.missing_mask[t - 1, d] or frame.missing_mask[t + 1, d]:
            raise ContractError(f"interpolate_singles: ({t}, {d}) is not an isolated missing point")
        out.values[t, d] = 0.5 * (frame.values[t - 1, d] + frame.values[t + 1, d])
        out.missing_mask[t, d] = False
    return out


def zero_fill_runs(frame: AlignedFrame, runs) -> tuple[AlignedFrame, np.ndarray]:
    """Zero-fill each run; returns the frame and per-timestamp run labels."""
    out = frame.copy()
    labels = np.zeros(frame.T, dtype=bool)
    for t0, length, d in runs:
        sl = slice(t0, t0 + length)
        out.values[sl, d] = 0.0
        out.missing_mask[sl, d] = False
        out.filled_mask[sl, d] = True
        labels[sl] = True
    return out, labels


# -- histogram outlier scores -----------------------------------------------

def hbos_fit(values: np.ndarray, k: int = 10, exclude: np.ndarray | None = None) -> HistogramModel:
    """Equal-width k-bin histogram per dimension over the observed [min, max].

    Entries flagged in ``exclude`` (or NaN) are left out. Empty bins get a
    pseudo-count of half a sample before normalisation.
    """
    if k < 2:
        raise ValueError(f"histogram needs k >= 2 bins, got {k}")
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    edges, freqs, constant = [], [], []
    for d in range(values.shape[1]):
        col = values[:, d]
        keep = np.isfinite(col)
        if exclude is not None:
            keep &= ~exclude[:, d]
        col = col[keep]
        if col.size == 0 or np.unique(col).size < 2:
            lo = float(col[0]) if col.size else 0.0
            edges.append(np.linspace(lo, lo + 1.0, k + 1))
            freqs.append(np.full(k, 1.0 / k))
            constant.append(d)
            continue
        e = np.linspace(col.min(), col.max(), k + 1)
        counts = np.bincount(_bin_index(col, e), minlength=k).astype(np.float64)
        f = counts / col.size
        f[f == 0] = 1.0 / (2 * col.size)
        edges.append(e)
        freqs.append(f / f.sum())
    return HistogramModel(k, edges, freqs, constant)


def _bin_index(col: np.ndarray, edges: np.ndarray) -> np.ndarray:
    k = len(edges) - 1
    width = (edges[-1] - edges[0]) / k
    idx = np.floor((col - edges[0]) / width).astype(np.int64)
    return np.clip(idx, 0, k - 1)


def hbos_score_matrix(model: HistogramModel, values: np.ndarray, skip: np.ndarray | None = None) -> np.ndarray:
    """Per-entry -log(bin frequency); skipped / constant entries score 0."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[1] != model.n:
        raise ShapeError(f"hbos_score: model has {model.n} dimensions, data has {values.shape[1]}")
    out = np.zeros(values.shape)
    for d in range(model.n):
        if d in model.constant_dims:
            continue
        col = np.nan_to_num(values[:, d], nan=model.edges[d][0])
        out[:, d] = -np.log(model.freqs[d][_bin_index(col, model.edges[d])])
    if skip is not None:
        out[skip] = 0.0
    return out


def hbos_score(model: HistogramModel, values: np.ndarray, skip: np.ndarray | None = None) -> np.ndarray:
    """Sum over dimensions of -log(frequency); higher means more anomalous."""
    return hbos_score_matrix(model, values, skip).sum(axis=1)


def top_fraction(scores: np.ndarray, fraction: float) -> np.ndarray:
    """Indices of the ceil(fraction * N) largest scores, ties to the earlier index."""
    n = int(math.ceil(fraction * len(scores) - 1e-9))
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return np.sort(order[:n])


def pre_label_global(scores, contamination: float, labels=None, beta=None,
                     entry_scores: np.ndarray | None = None, filled_single=(), runs=()) -> PreLabelReport:
    if not 0 < contamination < 0.5:
        raise ValueError(f"contamination must lie in (0, 0.5), got {contamination}")
    scores = np.asarray(scores, dtype=np.float64)
    T = len(scores)
    labels = np.zeros(T, dtype=bool) if labels is None else np.asarray(labels, dtype=bool).copy()
    beta = np.ones(T) if beta is None else np.asarray(beta, dtype=np.float64).copy()
    reasons = np.where(labels, "missing-run", "").astype(object)
    flagged = top_fraction(scores, contamination)
    labels[flagged] = True
    beta[labels] = 0.0
    reasons[flagged] = "global"
    if entry_scores is not None:
        pairs = [(int(t), int(np.argmax(entry_scores[t]))) for t in flagged]
    else:
        pairs = [(int(t), 0) for t in flagged]
    return PreLabelReport(pairs, flagged, list(filled_single), list(runs), scores, labels, beta,
                          reasons.astype(str))


# -- full pipeline -------------------------------------------------------------

@dataclass
class PreprocessResult:
    frame: AlignedFrame
    beta: np.ndarray
    labels: np.ndarray
    report: PreLabelReport
    hist: HistogramModel


def _runs_per_timestamp(labels: np.ndarray) -> list[tuple[int, int]]:
    runs, t, T = [], 0, len(labels)
    while t < T:
        if labels[t]:
            t0 = t
            while t < T and labels[t]:
                t += 1
            runs.append((t0, t - t0))
        else:
            t += 1
    return runs


def preprocess(frame: AlignedFrame, k: int = 10, contamination: float | None = 0.05,
               hist: HistogramModel | None = None) -> PreprocessResult:
    """Interpolate singles, zero-fill runs, then histogram pre-labelling.

    ``contamination=None`` skips the global pre-labelling step. Running this
    on its own output returns the same frame, labels and beta.
    """
    singles, runs = classify_missing(frame)
    filled = interpolate_singles(frame, singles)
    filled, run_labels = zero_fill_runs(filled, runs)
    run_labels |= filled.filled_mask.any(axis=1)
    if hist is None:
        hist = hbos_fit(filled.values, k, exclude=filled.filled_mask)
    entry = hbos_score_matrix(hist, filled.values, skip=filled.filled_mask)
    scores = entry.sum(axis=1)
    beta = np.where(run_labels, 0.0, 1.0)
    single_ts = sorted({t for t, _ in singles})
    run_spans = _runs_per_timestamp(run_labels)
    if contamination is None:
        reasons = np.where(run_labels, "missing-run", "")
        report = PreLabelReport([], np.array([], dtype=np.int64), single_ts, run_spans, scores,
                                run_labels.copy(), beta, reasons, list(hist.constant_dims))
    else:
        report = pre_label_global(scores, contamination, run_labels, beta, entry, single_ts, run_spans)
        report.constant_dims = list(hist.constant_dims)
    return PreprocessResult(filled, report.beta, report.labels, report, hist)


def interpolate_labelled(values: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Replace labelled timestamps by linear interpolation over unlabelled ones."""
    values = np.asarray(values, dtype=np.float64).copy()
    labels = np.asarray(labels, dtype=bool)
    good = np.flatnonzero(~labels)
    bad = np.flatnonzero(labels)
    if bad.size == 0 or good.size == 0:
        return values
    for d in range(values.shape[1]):
        values[bad, d] = np.interp(bad, good, values[good, d])
    return values


@dataclass
class Standardizer:
    """Per-channel z-scoring fitted on unmasked entries only."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray, beta: np.ndarray | None = None) -> "Standardizer":
        values = np.asarray(values, dtype=np.float64)
        keep = np.ones(len(values), dtype=bool) if beta is None else np.asarray(beta) > 0
        sub = values[keep] if keep.any() else values
        std = sub.std(axis=0)
        return cls(sub.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std
