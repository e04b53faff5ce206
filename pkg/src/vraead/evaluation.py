"""Point-wise metrics, benchmark reports, the four-way ablation and latent projections."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .baselines import baseline_detect, knn_fit, pca_fit
from .ingest import frame_from_array
from .model import ModelConfig
from .pipeline import DetectConfig, VraeDetector
from .preprocess import hbos_fit, hbos_score, interpolate_labelled, preprocess
from .synth import SynthConfig, SynthDataset, generate
from .train import TrainConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def count(cls, decisions, labels) -> "ConfusionCounts":
        d = np.asarray(decisions, dtype=bool)
        y = np.asarray(labels, dtype=bool)
        if d.shape != y.shape:
            raise ValueError(f"decisions {d.shape} and labels {y.shape} differ in length")
        return cls(int((d & y).sum()), int((d & ~y).sum()), int((~d & y).sum()), int((~d & ~y).sum()))


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    counts: ConfusionCounts
    flags: tuple[str, ...] = ()

    def __iter__(self):
        return iter((self.precision, self.recall, self.f1))


def prf1(decisions, labels) -> Metrics:
    """Precision, recall and F1; an undefined ratio is reported as 0 and flagged."""
    c = ConfusionCounts.count(decisions, labels)
    flags = []
    if c.tp + c.fp == 0:
        flags.append("precision-undefined")
        p = 0.0
    else:
        p = c.tp / (c.tp + c.fp)
    if c.tp + c.fn == 0:
        flags.append("recall-undefined")
        r = 0.0
    else:
        r = c.tp / (c.tp + c.fn)
    if p + r == 0:
        flags.append("f1-undefined")
        f = 0.0
    else:
        f = 2 * p * r / (p + r)
    return Metrics(p, r, f, c, tuple(flags))


# -- benchmark ---------------------------------------------------------------

Detector = Callable[[SynthDataset], np.ndarray]   # returns boolean decisions over the test split

REPORT_COLUMNS = ("detector", "P", "R", "F1", "runtime_s", "seed")


@dataclass
class ReportRow:
    detector: str
    precision: float = float("nan")
    recall: float = float("nan")
    f1: float = float("nan")
    runtime_s: float = 0.0
    seed: int = 0
    failed: str | None = None

    def cells(self) -> list[str]:
        if self.failed is not None:
            return [self.detector, "FAILED", "FAILED", "FAILED", f"{self.runtime_s:.2f}", str(self.seed)]
        return [self.detector, f"{self.precision:.4f}", f"{self.recall:.4f}", f"{self.f1:.4f}",
                f"{self.runtime_s:.2f}", str(self.seed)]


@dataclass
class Report:
    rows: list[ReportRow] = field(default_factory=list)

    def sorted(self) -> list[ReportRow]:
        ok = sorted((r for r in self.rows if r.failed is None), key=lambda r: -r.f1)
        return ok + [r for r in self.rows if r.failed is not None]

    def row(self, name: str) -> ReportRow:
        return next(r for r in self.rows if r.detector == name)

    def to_text(self) -> str:
        table = [list(REPORT_COLUMNS)] + [r.cells() for r in self.sorted()]
        widths = [max(len(line[i]) for line in table) for i in range(len(REPORT_COLUMNS))]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in table) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.sorted():
            w.writerow(r.cells())
        return buf.getvalue()

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        txt, csv_path = stem.with_suffix(".txt"), stem.with_suffix(".csv")
        txt.write_text(self.to_text())
        csv_path.write_text(self.to_csv())
        return txt, csv_path


def read_report_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def run_benchmark(detectors: dict[str, Detector], dataset: SynthDataset, seed: int = 0) -> Report:
    """Evaluate every detector on the same test split; a failing detector gets a FAILED row."""
    report = Report()
    for name, det in detectors.items():
        t0 = time.perf_counter()
        try:
            decisions = det(dataset)
            if decisions is None:
                raise ValueError("detector produced no output")
            m = prf1(decisions, dataset.test_labels)
            report.rows.append(ReportRow(name, m.precision, m.recall, m.f1, time.perf_counter() - t0, seed))
        except Exception as exc:  # noqa: BLE001 - any detector failure is reported, not raised
            logger.warning("detector %s failed: %s", name, exc)
            report.rows.append(ReportRow(name, runtime_s=time.perf_counter() - t0, seed=seed,
                                         failed=f"{type(exc).__name__}: {exc}"))
    return report


def knn_detector(k: int = 5) -> Detector:
    def run(ds: SynthDataset) -> np.ndarray:
        return baseline_detect(knn_fit(ds.train, k).score(ds.test), ds.config.contamination)
    return run


def pca_detector(m: int | None = None) -> Detector:
    def run(ds: SynthDataset) -> np.ndarray:
        return baseline_detect(pca_fit(ds.train, m).score(ds.test), ds.config.contamination)
    return run


def hbos_detector(k: int = 10) -> Detector:
    def run(ds: SynthDataset) -> np.ndarray:
        return baseline_detect(hbos_score(hbos_fit(ds.train, k), ds.test), ds.config.contamination)
    return run


def vrae_detector(model_cfg: ModelConfig, train_cfg: TrainConfig, detect_cfg: DetectConfig | None = None,
                  top_fraction: bool = True) -> Detector:
    """Train on the (clean) train split and score the test split.

    With ``top_fraction`` the decisions are the highest raw NLLs at the known
    test contamination, the same rule the baselines use; otherwise the
    normalised score is thresholded.
    """
    def run(ds: SynthDataset) -> np.ndarray:
        cfg = replace(model_cfg, n_features=ds.train.shape[1])
        det = VraeDetector(cfg, train_cfg, detect_cfg or DetectConfig(seed=train_cfg.seed)).fit(ds.train)
        if top_fraction:
            return baseline_detect(det.raw_scores(ds.test), ds.config.contamination)
        return det.score(ds.test).decision
    return run


# -- ablation ----------------------------------------------------------------

ABLATION_CONFIGS = {
    1: "baseline",
    2: "pre-detection",
    3: "elbo+",
    4: "pre-detection+elbo+",
}


@dataclass
class AblationConfig:
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(
        n_train=3000, n_test=1500, train_contamination=0.05, train_missing_runs=20))
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        window=24, n_features=5, hidden=32, latent=3, mc_samples=10))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        iterations=200, batch_size=64, lr=3e-3, eval_every=50))
    hbos_bins: int = 10
    hbos_contamination: float = 0.05
    seeds: Sequence[int] = (0, 1, 2, 3, 4)


def ablation_inputs(ds: SynthDataset, variant: int, bins: int = 10, contamination: float = 0.05
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Training values and beta for one of the four configurations.

    Missing values are always repaired (singles interpolated, runs zero
    filled). Pre-detection removes histogram-flagged points: by masking when
    the masked objective is on, otherwise by interpolating over them. The
    masked objective alone masks only the zero-filled runs.
    """
    if variant not in ABLATION_CONFIGS:
        raise ValueError(f"variant must be one of {sorted(ABLATION_CONFIGS)}")
    pre_detect = variant in (2, 4)
    masked = variant in (3, 4)
    frame = frame_from_array(ds.train)
    base = preprocess(frame, k=bins, contamination=None)
    values = base.frame.values
    run_labels = base.labels
    labels = run_labels
    if pre_detect:
        labels = preprocess(frame, k=bins, contamination=contamination).labels
    if masked:
        return values, np.where(labels, 0.0, 1.0)
    if pre_detect:
        values = interpolate_labelled(values, labels & ~run_labels)
    return values, np.ones(len(values))


@dataclass
class AblationResult:
    f1: dict[int, list[float]]

    def mean(self, variant: int) -> float:
        return float(np.mean(self.f1[variant]))

    def to_report(self) -> Report:
        return Report([ReportRow(f"({v}) {ABLATION_CONFIGS[v]}", f1=self.mean(v),
                                 precision=float("nan"), recall=float("nan"))
                       for v in sorted(self.f1)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config", "name", "seed", "F1"])
        for v in sorted(self.f1):
            for s, f in zip(range(len(self.f1[v])), self.f1[v]):
                w.writerow([v, ABLATION_CONFIGS[v], s, f"{f:.6f}"])
        return buf.getvalue()


def ablation(cfg: AblationConfig, variants: Sequence[int] = (1, 2, 3, 4)) -> AblationResult:
    """Train every configuration on the same data and seeds; F1 on the clean test split."""
    out: dict[int, list[float]] = {v: [] for v in variants}
    for seed in cfg.seeds:
        ds = generate(replace(cfg.synth, seed=seed))
        for v in variants:
            values, beta = ablation_inputs(ds, v, cfg.hbos_bins, cfg.hbos_contamination)
            det = VraeDetector(replace(cfg.model, n_features=ds.train.shape[1], seed=seed),
                               replace(cfg.train, seed=seed), DetectConfig(seed=seed))
            det.fit(values, beta)
            decisions = baseline_detect(det.raw_scores(ds.test), ds.config.contamination)
            f = prf1(decisions, ds.test_labels).f1
            logger.info("ablation seed %d config %d F1 %.4f", seed, v, f)
            out[v].append(f)
    return AblationResult(out)


# -- latent projection -------------------------------------------------------

def latent_export(detector: VraeDetector, values: np.ndarray, stride: int = 1,
                  timestamps: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """mu_z for each window plus the window start time (index when no timestamps)."""
    mu, starts = detector.latent_means(values, stride)
    t = starts if timestamps is None else np.asarray(timestamps)[starts]
    return mu, t


def pca_project_2d(table: np.ndarray) -> np.ndarray:
    table = np.asarray(table, dtype=np.float64)
    if table.shape[1] < 2:
        raise ValueError("need at least two latent dimensions to project")
    return pca_fit(table, m=2).project(table)


def write_projection(coords: np.ndarray, starts: np.ndarray, csv_path: str | Path,
                     svg_path: str | Path | None = None, title: str = "") -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["window_start", "pc1", "pc2"])
        for s, (a, b) in zip(starts, coords):
            w.writerow([s, repr(float(a)), repr(float(b))])
    if svg_path is None:
        return
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    sc = ax.scatter(coords[:, 0], coords[:, 1], c=np.arange(len(coords)), cmap="viridis", s=6)
    fig.colorbar(sc, ax=ax, label="window order")
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)
