"""Synthetic benchmark: correlated Gaussian normals, uniform-box anomalies."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .ingest import HOUR, CsvSchema, format_timestamp, parse_csv

SYNTH_START_HOUR = 438_288  # 2020-01-01T00:00:00Z


@dataclass
class SynthConfig:
    n_train: int = 20_000
    n_test: int = 4_000
    d: int = 5
    contamination: float = 0.2
    mean: float = 0.0
    std: float = 1.0
    corr: float = 0.3
    box_low: float = -6.0
    box_high: float = 6.0
    train_contamination: float = 0.0
    train_missing_runs: int = 0        # number of missing stretches (length 2-6) planted in train
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if not 0 < self.contamination < 1:
            raise ValueError(f"contamination must lie in (0, 1), got {self.contamination}")
        if not 0 <= self.train_contamination < 1:
            raise ValueError("train_contamination must lie in [0, 1)")
        if self.n_train < 1 or self.n_test < 1 or self.d < 1 or self.std <= 0:
            raise ValueError("sizes and std must be positive")
        if not -1.0 / max(self.d - 1, 1) < self.corr < 1:
            raise ValueError(f"corr={self.corr} does not give a positive-definite covariance")
        if not (self.box_low < self.mean - 3 * self.std and self.box_high > self.mean + 3 * self.std):
            raise ValueError("uniform box must enclose the Gaussian bulk (mean +/- 3 std)")
        return self

    def covariance(self) -> np.ndarray:
        c = np.full((self.d, self.d), self.corr) + (1 - self.corr) * np.eye(self.d)
        return c * self.std ** 2


@dataclass
class SynthDataset:
    train: np.ndarray
    train_labels: np.ndarray
    test: np.ndarray
    test_labels: np.ndarray
    config: SynthConfig


def _mixture(rng, n: int, n_anom: int, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    mean = np.full(cfg.d, cfg.mean)
    normal = rng.multivariate_normal(mean, cfg.covariance(), size=n - n_anom, method="cholesky")
    anom = rng.uniform(cfg.box_low, cfg.box_high, size=(n_anom, cfg.d))
    X = np.vstack([normal, anom])
    y = np.r_[np.zeros(n - n_anom, dtype=bool), np.ones(n_anom, dtype=bool)]
    order = rng.permutation(n)
    return X[order], y[order]


def generate(cfg: SynthConfig) -> SynthDataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_train_anom = int(math.ceil(cfg.train_contamination * cfg.n_train - 1e-9))
    train, train_y = _mixture(rng, cfg.n_train, n_train_anom, cfg)
    n_test_anom = int(math.ceil(cfg.contamination * cfg.n_test - 1e-9))
    test, test_y = _mixture(rng, cfg.n_test, n_test_anom, cfg)
    if cfg.train_missing_runs:
        train = train.copy()
        for _ in range(cfg.train_missing_runs):
            length = int(rng.integers(2, 7))
            t0 = int(rng.integers(1, cfg.n_train - length - 1))
            dims = rng.random(cfg.d) < 0.5
            dims[rng.integers(cfg.d)] = True
            train[t0:t0 + length, dims] = np.nan
    return SynthDataset(train, train_y, test, test_y, cfg)


def _write_part(path: Path, X: np.ndarray, y: np.ndarray, start_hour: int) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *[f"x{i}" for i in range(X.shape[1])], "label"])
        for t in range(len(X)):
            vals = ["" if np.isnan(v) else repr(float(v)) for v in X[t]]
            w.writerow([format_timestamp((start_hour + t) * HOUR), *vals, int(y[t])])


def export(dataset: SynthDataset, directory: str | Path) -> dict[str, Path]:
    """Write train.csv, test.csv (hourly timestamps + label) and a metadata sidecar."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"train": out / "train.csv", "test": out / "test.csv", "meta": out / "synth_meta.json"}
    _write_part(paths["train"], dataset.train, dataset.train_labels, SYNTH_START_HOUR)
    _write_part(paths["test"], dataset.test, dataset.test_labels, SYNTH_START_HOUR + len(dataset.train))
    paths["meta"].write_text(json.dumps({"synth": asdict(dataset.config)}, indent=2, sort_keys=True))
    return paths


def load_part(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(values, labels, timestamps) from an exported CSV."""
    raw = parse_csv(path, CsvSchema(label_column="label"))
    labels = raw.labels if raw.labels is not None else np.zeros(len(raw.timestamps), dtype=bool)
    return raw.values, labels, raw.timestamps
