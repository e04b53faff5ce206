"""End-to-end detector: scaling, windowing, training, scoring and persistence."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .detect import AnomalyScoreSeries, aggregate_overlaps, normalize_scores, reconstruction_probability
from .ingest import WindowBatch, slide_windows
from .model import VRAE, ModelConfig
from .preprocess import Standardizer
from .train import TrainConfig, fit, portable_config

EXTRA = "extra."


@dataclass
class DetectConfig:
    anchor: float = 0.5          # reference quantile mapped to score 0.5
    threshold: float = 0.5
    stride: int = 1              # scoring stride
    train_stride: int = 1
    val_fraction: float = 0.15
    seed: int = 0


@dataclass
class VraeDetector:
    model_cfg: ModelConfig
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    detect_cfg: DetectConfig = field(default_factory=DetectConfig)
    model: VRAE | None = None
    scaler: Standardizer | None = None
    reference: np.ndarray | None = None
    history: list = field(default_factory=list)

    # -- training ------------------------------------------------------------
    def fit(self, values: np.ndarray, beta: np.ndarray | None = None) -> "VraeDetector":
        values = _as_2d(values)
        T = len(values)
        beta = np.ones(T) if beta is None else np.asarray(beta, dtype=np.float64)
        self.scaler = Standardizer.fit(values, beta)
        scaled = self.scaler.transform(values)
        batch = slide_windows(scaled, self.model_cfg.window, self.detect_cfg.train_stride, beta)
        tr, va = split_train_val(batch, self.detect_cfg.val_fraction)
        self.model = VRAE(self.model_cfg)
        _, self.history = fit(self.model, tr, va, self.train_cfg)
        # reference distribution: per-timestamp NLL over the validation stretch
        nll = -reconstruction_probability(self.model, va.windows, self.model_cfg.mc_samples,
                                          np.random.default_rng(self.detect_cfg.seed))
        starts = va.origin[:, 1] - va.origin[0, 1]
        agg, covered = aggregate_overlaps(nll, starts)
        vbeta, _ = aggregate_overlaps(va.beta, starts)
        self.reference = agg[covered & (vbeta == 1)]
        if self.reference.size == 0:
            self.reference = agg[covered]
        return self

    # -- scoring -------------------------------------------------------------
    def window_nll(self, values: np.ndarray, stride: int | None = None, seed: int | None = None
                   ) -> tuple[np.ndarray, WindowBatch]:
        self._check_fitted()
        scaled = self.scaler.transform(_as_2d(values))
        batch = slide_windows(scaled, self.model_cfg.window, stride or self.detect_cfg.stride)
        rng = np.random.default_rng(self.detect_cfg.seed if seed is None else seed)
        return -reconstruction_probability(self.model, batch.windows, self.model_cfg.mc_samples, rng), batch

    def raw_scores(self, values: np.ndarray, seed: int | None = None) -> np.ndarray:
        """Per-timestamp raw NLL (higher = more anomalous)."""
        values = _as_2d(values)
        W = self.model_cfg.window
        stride = self.detect_cfg.stride
        nll, batch = self.window_nll(values, stride, seed)
        starts = batch.origin[:, 1]
        T = len(values)
        if starts[-1] + W < T:  # make sure the tail is covered
            tail_nll, _ = self.window_nll(values[T - W:], 1, seed)
            nll = np.vstack([nll, tail_nll])
            starts = np.r_[starts, T - W]
        agg, _ = aggregate_overlaps(nll, starts, T)
        return agg

    def score(self, values: np.ndarray, timestamps: np.ndarray | None = None,
              seed: int | None = None) -> AnomalyScoreSeries:
        raw = self.raw_scores(values, seed)
        score = normalize_scores(raw, self.reference, self.detect_cfg.anchor)
        ts = np.arange(len(raw)) if timestamps is None else np.asarray(timestamps)
        meta = {"L": self.model_cfg.mc_samples, "anchor": self.detect_cfg.anchor,
                "seed": self.detect_cfg.seed if seed is None else seed}
        return AnomalyScoreSeries(ts, raw, score, self.detect_cfg.threshold, meta)

    def latent_means(self, values: np.ndarray, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """mu_z for each window and the window start indices."""
        self._check_fitted()
        scaled = self.scaler.transform(_as_2d(values))
        batch = slide_windows(scaled, self.model_cfg.window, stride)
        out = []
        with no_grad():
            for s in range(0, len(batch), 512):
                out.append(self.model.encode(batch.windows[s:s + 512]).mu_z.data)
        return np.vstack(out), batch.origin[:, 1]

    # -- persistence -------------------------------------------------------------
    def save(self, path: str | Path, meta: dict | None = None) -> bytes:
        self._check_fitted()
        arrays = {k: p.data for k, p in self.model.params.items()}
        arrays[EXTRA + "scaler.mean"] = self.scaler.mean
        arrays[EXTRA + "scaler.std"] = self.scaler.std
        arrays[EXTRA + "reference_nll"] = self.reference
        info = {"train": portable_config(self.train_cfg), "detect": asdict(self.detect_cfg), **(meta or {})}
        return save_checkpoint(path, arrays, self.model_cfg, info)

    @classmethod
    def load(cls, path: str | Path, expected: ModelConfig | None = None) -> "VraeDetector":
        cfg, arrays, meta = load_checkpoint(path, expected)
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()
                  if not k.startswith(EXTRA)}
        det = cls(cfg, TrainConfig(**meta.get("train", {})), DetectConfig(**meta.get("detect", {})))
        det.model = VRAE(cfg, params)
        det.scaler = Standardizer(arrays[EXTRA + "scaler.mean"], arrays[EXTRA + "scaler.std"])
        det.reference = arrays[EXTRA + "reference_nll"]
        return det

    def _check_fitted(self) -> None:
        if self.model is None or self.scaler is None:
            raise RuntimeError("detector is not fitted")


def split_train_val(batch: WindowBatch, val_fraction: float) -> tuple[WindowBatch, WindowBatch]:
    B = len(batch)
    if B < 2:
        raise ValueError(f"need at least 2 windows for a train/validation split, got {B}")
    n_val = min(B - 1, max(1, int(math.floor(B * val_fraction))))
    return batch.subset(np.arange(B - n_val)), batch.subset(np.arange(B - n_val, B))


def _as_2d(values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return values[:, None] if values.ndim == 1 else values
