"""Monte Carlo reconstruction probability, rank normalisation and thresholding."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import ContractError, no_grad
from .ingest import format_timestamp
from .model import VRAE
from .objective import gaussian_logpdf

DEFAULT_THRESHOLD = 0.5


def reconstruction_probability(model: VRAE, windows: np.ndarray, L: int, rng: np.random.Generator,
                               chunk: int = 512) -> np.ndarray:
    """(1/L) sum_l log p(x_t | mu_l, sigma_l), summed over features.

    The encoder and attention are deterministic, so they run once per chunk;
    only z and the contexts are resampled L times. Returns (B, W), or (W,)
    for a single (W, n) window.
    """
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    for name, p in model.params.items():
        if not np.all(np.isfinite(p.data)):
            raise ContractError(f"parameter {name!r} contains non-finite values")
    windows = np.asarray(windows, dtype=np.float64)
    single = windows.ndim == 2
    if single:
        windows = windows[None]
    out = np.zeros(windows.shape[:2])
    with no_grad():
        for s in range(0, len(windows), chunk):
            x = windows[s:s + chunk]
            enc = model.encode(x)
            att = model.attention(enc.states)
            acc = np.zeros(x.shape[:2])
            for _ in range(L):
                r = model.forward(x, rng=rng, enc=enc, alpha_cdet=att)
                acc += gaussian_logpdf(x, r.dec.mu_x.data, r.dec.sigma_x.data).sum(axis=-1)
            out[s:s + chunk] = acc / L
    return out[0] if single else out


def ecdf_midrank(values: np.ndarray, reference: np.ndarray) -> np.ndarray:
    ref = np.sort(np.asarray(reference, dtype=np.float64))
    values = np.asarray(values, dtype=np.float64)
    lo = np.searchsorted(ref, values, side="left")
    hi = np.searchsorted(ref, values, side="right")
    return (lo + 0.5 * (hi - lo)) / len(ref)


def normalize_scores(raw_nll, reference, anchor: float = 0.5) -> np.ndarray:
    """Map raw NLL to [0, 1] through its mid-rank in the reference distribution.

    ``anchor`` is the reference quantile that lands on 0.5; the mapping is
    piecewise linear in the empirical CDF on either side of it. With the
    default 0.5 the score is the empirical CDF itself.
    """
    reference = np.asarray(reference, dtype=np.float64)
    if reference.size == 0:
        raise ContractError("normalize_scores: empty reference distribution")
    if not 0 < anchor < 1:
        raise ValueError(f"anchor quantile must lie in (0, 1), got {anchor}")
    F = ecdf_midrank(raw_nll, reference.ravel())
    s = np.where(F <= anchor, 0.5 * F / anchor, 0.5 + 0.5 * (F - anchor) / (1.0 - anchor))
    return np.clip(s, 0.0, 1.0)


def aggregate_overlaps(window_values: np.ndarray, starts: np.ndarray, T: int | None = None
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Per-timestamp mean over every window covering it.

    Returns (values, covered); uncovered timestamps are NaN and trigger a
    warning.
    """
    window_values = np.asarray(window_values, dtype=np.float64)
    starts = np.asarray(starts, dtype=np.int64)
    B, W = window_values.shape
    T = int(starts.max() + W) if T is None else T
    idx = (starts[:, None] + np.arange(W)[None, :]).ravel()
    if idx.max(initial=0) >= T or (starts < 0).any():
        raise ValueError("window origins fall outside the series")
    sums = np.bincount(idx, weights=window_values.ravel(), minlength=T)
    counts = np.bincount(idx, minlength=T)
    covered = counts > 0
    if not covered.all():
        warnings.warn(f"{int((~covered).sum())} timestamp(s) are covered by no window and are excluded",
                      stacklevel=2)
    with np.errstate(invalid="ignore"):
        vals = np.where(covered, sums / np.maximum(counts, 1), np.nan)
    return vals, covered


@dataclass
class AnomalyScoreSeries:
    timestamps: np.ndarray
    raw_nll: np.ndarray
    score: np.ndarray
    threshold: float = DEFAULT_THRESHOLD
    meta: dict = field(default_factory=dict)

    @property
    def decision(self) -> np.ndarray:
        return self.score > self.threshold

    def to_csv(self, path: str | Path, epoch_timestamps: bool = True) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            for k, v in {**self.meta, "threshold": self.threshold}.items():
                fh.write(f"# {k}={v}\n")
            w = csv.writer(fh)
            w.writerow(["timestamp", "raw_nll", "score", "decision"])
            for t, r, s, d in zip(self.timestamps, self.raw_nll, self.score, self.decision):
                ts = format_timestamp(t) if epoch_timestamps else t
                w.writerow([ts, repr(float(r)), repr(float(s)), int(d)])


def read_scores_csv(path: str | Path) -> AnomalyScoreSeries:
    meta, rows = {}, []
    with open(path, newline="", encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k.strip()] = v
            else:
                rows.append(line)
    reader = csv.DictReader(rows)
    recs = list(reader)
    threshold = float(meta.pop("threshold", DEFAULT_THRESHOLD))
    return AnomalyScoreSeries(
        np.array([r["timestamp"] for r in recs]),
        np.array([float(r["raw_nll"]) for r in recs]),
        np.array([float(r["score"]) for r in recs]),
        threshold, meta)


def plot_series_svg(values: np.ndarray, flagged: np.ndarray, path: str | Path, title: str = "") -> None:
    """Line plot of each channel with flagged timestamps marked in red."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    t = np.arange(len(values))
    fig, ax = plt.subplots(figsize=(10, 3))
    for d in range(values.shape[1]):
        ax.plot(t, values[:, d], lw=0.8)
        ax.scatter(t[flagged], values[flagged, d], color="red", s=12, zorder=3)
    ax.set_title(title)
    ax.set_xlabel("hour")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
