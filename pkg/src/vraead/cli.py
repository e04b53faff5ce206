"""Command line entry point: synth, preprocess, train, detect, eval, ablate, project."""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import baseline_detect, knn_fit, pca_fit
from .checkpoint import CheckpointError
from .detect import plot_series_svg, read_scores_csv
from .evaluation import (AblationConfig, Report, ReportRow, ablation, latent_export, pca_project_2d, prf1,
                         write_projection)
from .ingest import (CsvSchema, WindowSizeError, align_hourly, format_timestamp, frame_from_array, parse_csv,
                     read_frame_csv, write_frame_csv)
from .model import ModelConfig
from .pipeline import DetectConfig, VraeDetector
from .preprocess import hbos_fit, hbos_score, preprocess
from .synth import SynthConfig, export, generate
from .train import TrainConfig

logger = logging.getLogger("vraead")

CONFIG_DIR_ENV = "VRAEAD_CONFIG_DIR"

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class PreprocessKnobs:
    bins: int = 10
    contamination: float = 0.05


@dataclass
class DetectKnobs:
    anchor: float = 0.5
    threshold: float = 0.5
    stride: int = 1
    train_stride: int = 1
    val_fraction: float = 0.15
    decision: str = "threshold"       # "threshold" or "top-fraction"
    contamination: float = 0.2        # used by the top-fraction rule


@dataclass
class BaselineKnobs:
    knn_k: int = 5
    pca_m: int = 0                    # 0: smallest m reaching 90% variance


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
    "preprocess": PreprocessKnobs,
    "detect": DetectKnobs,
    "baselines": BaselineKnobs,
}
SKIP_KEYS = {("model", "seed"), ("train", "seed"), ("synth", "seed"),
             ("train", "checkpoint_path"), ("train", "log_path")}

# where each default comes from: "published" values appear in the reference
# hyperparameter table or text, "chosen" ones are our own, "plumbing" is tooling
PUBLISHED = {("model", k) for k in ("window", "hidden", "layers", "latent", "lambda_kl", "eta_a")}
PUBLISHED |= {("train", k) for k in ("iterations", "lr", "batch_size")}
PUBLISHED |= {("synth", k) for k in ("n_train", "n_test", "d", "contamination")}
PUBLISHED |= {("detect", "threshold")}
PLUMBING = {("train", "eval_every"), ("train", "val_max_windows"), ("train", "iteration_unit"),
            ("detect", "stride"), ("detect", "decision")}

PRESETS = {
    "full": {},
    "desk": {"model.hidden": "64", "model.window": "48", "train.batch_size": "128",
             "train.iterations": "300", "train.lr": "1e-3"},
}


def origin(section: str, key: str) -> str:
    if (section, key) in PUBLISHED:
        return "published"
    if (section, key) in PLUMBING:
        return "plumbing"
    return "chosen"


def config_keys() -> list[tuple[str, str, object, str]]:
    out = []
    for sec, cls in SECTIONS.items():
        for f in fields(cls):
            if (sec, f.name) in SKIP_KEYS:
                continue
            out.append((sec, f.name, getattr(cls(), f.name), origin(sec, f.name)))
    return out


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessKnobs = field(default_factory=PreprocessKnobs)
    detect: DetectKnobs = field(default_factory=DetectKnobs)
    baselines: BaselineKnobs = field(default_factory=BaselineKnobs)
    seed: int = 0
    preset: str = "full"

    def to_dict(self) -> dict:
        return {"preset": self.preset, "seed": self.seed,
                **{sec: asdict(getattr(self, sec)) for sec in SECTIONS}}

    def detect_config(self) -> DetectConfig:
        d = self.detect
        return DetectConfig(d.anchor, d.threshold, d.stride, d.train_stride, d.val_fraction, self.seed)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.synth.validate()
        if self.preprocess.bins < 1 or not 0 < self.preprocess.contamination < 0.5:
            raise ConfigError("preprocess: bins must be >= 1 and 0 < contamination < 0.5")
        d = self.detect
        if d.decision not in ("threshold", "top-fraction"):
            raise ConfigError(f"detect.decision must be 'threshold' or 'top-fraction', got {d.decision!r}")
        if not 0 < d.anchor < 1 or not 0 < d.contamination < 1 or not 0 < d.val_fraction < 1:
            raise ConfigError("detect: anchor, contamination and val_fraction must lie in (0, 1)")
        if d.stride < 1 or d.train_stride < 1:
            raise ConfigError("detect: strides must be >= 1")
        if self.baselines.knn_k < 1 or self.baselines.pca_m < 0:
            raise ConfigError("baselines: knn_k >= 1 and pca_m >= 0 required")
        return self


def _coerce(text: str, like):
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if like is None:
        return None if text.lower() in ("", "none") else text
    return text


def resolve_config(config_path: str | None = None, overrides: list[str] | None = None,
                   preset: str = "full", seed: int = 0) -> RunConfig:
    """Preset, then config file, then ``section.key=value`` overrides."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values: dict[str, str] = dict(PRESETS[preset])
    if config_path:
        path = Path(config_path)
        if not path.exists() and os.environ.get(CONFIG_DIR_ENV):
            path = Path(os.environ[CONFIG_DIR_ENV]) / config_path
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {config_path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read(path, encoding="utf-8")
        for sec in parser.sections():
            for key, val in parser.items(sec):
                values[f"{sec}.{key}"] = val
    for item in overrides or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        values[key.strip()] = val.strip()

    valid = {f"{s}.{k}": d for s, k, d, _ in config_keys()}
    unknown = sorted(set(values) - set(valid))
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown}; valid keys: {', '.join(sorted(valid))}")
    cfg = RunConfig(seed=seed, preset=preset)
    for dotted, text in values.items():
        sec, key = dotted.split(".", 1)
        try:
            val = _coerce(text, valid[dotted])
        except ValueError as exc:
            raise ConfigError(f"{dotted}: cannot parse {text!r} ({exc})") from None
        setattr(cfg, sec, replace(getattr(cfg, sec), **{key: val}))
    cfg.model = replace(cfg.model, seed=seed)
    cfg.train = replace(cfg.train, seed=seed)
    cfg.synth = replace(cfg.synth, seed=seed)
    return cfg.validate()


# -- helpers -----------------------------------------------------------------

def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_metadata(target: str | Path, command: str, cfg: RunConfig, inputs: list, outputs: list,
                   extra: dict | None = None) -> Path:
    """Sidecar next to ``target`` with the resolved config and artifact checksums."""
    meta = {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict(),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        **(extra or {}),
    }
    path = Path(str(target) + ".meta.json")
    path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _require(path: str | Path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input file not found: {p}")
    return p


def load_series(path: str | Path) -> tuple[np.ndarray, np.ndarray | None, np.ndarray, np.ndarray | None]:
    """(values, beta, epoch timestamps, labels) from a raw or preprocessed CSV."""
    path = _require(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    if any(h.endswith("_missing") for h in header):
        frame, extras = read_frame_csv(path)
        beta = extras.get("beta")
        return frame.values, beta, frame.timestamps, frame.labels
    raw = parse_csv(path, CsvSchema(label_column="label" if "label" in header else None))
    frame = align_hourly(raw)
    return frame.values, None, frame.timestamps, frame.labels


# -- subcommands -------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    ds = generate(cfg.synth)
    paths = export(ds, args.out)
    write_metadata(Path(args.out) / "synth", "synth", cfg, [], [paths["train"], paths["test"], paths["meta"]])
    print(f"wrote {paths['train']} ({len(ds.train)} rows) and {paths['test']} "
          f"({len(ds.test)} rows, {int(ds.test_labels.sum())} anomalies)")
    return EXIT_OK


def cmd_preprocess(args, cfg: RunConfig) -> int:
    src = _require(args.input)
    with open(src, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    raw = parse_csv(src, CsvSchema(label_column="label" if "label" in header else None))
    frame = align_hourly(raw)
    frame.labels = None
    res = preprocess(frame, cfg.preprocess.bins, cfg.preprocess.contamination)
    write_frame_csv(res.frame, args.out, beta=res.beta, labels=res.labels, reasons=res.report.reasons)
    report_path = Path(str(args.out) + ".labels.csv")
    res.report.to_csv(report_path, res.frame.timestamps)
    write_metadata(args.out, "preprocess", cfg, [src], [args.out, report_path],
                   {"constant_dims": res.report.constant_dims})
    print(f"{res.frame.T} hourly rows; {int((res.beta == 0).sum())} masked; "
          f"{len(res.report.filled_single)} single gaps interpolated")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    values, beta, _, _ = load_series(args.input)
    if np.isnan(values).any():
        res = preprocess(frame_from_array(values), cfg.preprocess.bins, cfg.preprocess.contamination)
        values, beta = res.frame.values, res.beta
    model_cfg = replace(cfg.model, n_features=values.shape[1])
    if len(values) < model_cfg.window:
        raise WindowSizeError(f"series length T={len(values)} is shorter than window W={model_cfg.window}")
    train_cfg = replace(cfg.train, log_path=args.log)
    det = VraeDetector(model_cfg, train_cfg, cfg.detect_config()).fit(values, beta)
    det.save(args.out, {"seed": cfg.seed})
    outputs = [args.out] + ([args.log] if args.log else [])
    write_metadata(args.out, "train", replace(cfg, model=model_cfg), [args.input], outputs,
                   {"val_loss": [h["val_loss"] for h in det.history if h["val_loss"] is not None]})
    print(f"trained {train_cfg.iterations} iterations; checkpoint {args.out}")
    return EXIT_OK


def cmd_detect(args, cfg: RunConfig) -> int:
    det = VraeDetector.load(_require(args.model))
    det.detect_cfg = cfg.detect_config()
    values, _, ts, _ = load_series(args.input)
    if np.isnan(values).any():
        values = preprocess(frame_from_array(values), cfg.preprocess.bins, cfg.preprocess.contamination).frame.values
    series = det.score(values, ts, seed=cfg.seed)
    series.meta["checkpoint"] = sha256_file(args.model)[:16]
    series.to_csv(args.out)
    outputs = [args.out]
    if args.plot:
        plot_series_svg(values, series.decision, args.plot, "flagged timestamps")
        outputs.append(args.plot)
    write_metadata(args.out, "detect", cfg, [args.model, args.input], outputs)
    print(f"{int(series.decision.sum())} of {len(series.score)} timestamps above {series.threshold}")
    return EXIT_OK


def _decisions(series, cfg: RunConfig) -> np.ndarray:
    if cfg.detect.decision == "top-fraction":
        return baseline_detect(series.raw_nll, cfg.detect.contamination)
    return series.decision


def cmd_eval(args, cfg: RunConfig) -> int:
    values, _, ts, labels = load_series(args.labels)
    if labels is None:
        raise ConfigError(f"{args.labels}: no 'label' column to evaluate against")
    stamps = [format_timestamp(t) for t in ts]
    index = {s: i for i, s in enumerate(stamps)}
    report = Report()
    inputs = [args.labels]
    for item in args.scores or []:
        name, _, path = item.rpartition("=")
        name = name or Path(path).stem
        try:
            series = read_scores_csv(_require(path))
            inputs.append(path)
            pos = np.array([index[str(t)] for t in series.timestamps])
            m = prf1(_decisions(series, cfg), labels[pos])
            report.rows.append(ReportRow(name, m.precision, m.recall, m.f1, 0.0, cfg.seed))
        except (OSError, KeyError, ValueError) as exc:
            report.rows.append(ReportRow(name, seed=cfg.seed, failed=str(exc)))
    if args.train:
        train_values, _, _, _ = load_series(args.train)
        inputs.append(args.train)
        b = cfg.baselines
        scorers = {
            "knn": lambda: knn_fit(train_values, b.knn_k).score(values, workers=args.threads),
            "pca": lambda: pca_fit(train_values, b.pca_m or None).score(values),
            "hbos": lambda: hbos_score(hbos_fit(train_values, cfg.preprocess.bins), values),
        }
        for name, fn in scorers.items():
            try:
                m = prf1(baseline_detect(fn(), cfg.detect.contamination), labels)
                report.rows.append(ReportRow(name, m.precision, m.recall, m.f1, 0.0, cfg.seed))
            except (ValueError, RuntimeError) as exc:
                report.rows.append(ReportRow(name, seed=cfg.seed, failed=str(exc)))
    txt, csv_path = report.write(args.out)
    write_metadata(args.out, "eval", cfg, inputs, [txt, csv_path])
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    synth = cfg.synth if cfg.synth.train_contamination > 0 else replace(cfg.synth, train_contamination=0.05)
    acfg = AblationConfig(synth, cfg.model, cfg.train, cfg.preprocess.bins, cfg.preprocess.contamination,
                          tuple(cfg.seed + i for i in range(args.seeds)))
    res = ablation(acfg)
    report = res.to_report()
    txt, csv_path = report.write(args.out)
    runs = Path(args.out).with_suffix(".runs.csv")
    runs.write_text(res.to_csv())
    write_metadata(args.out, "ablate", cfg, [], [txt, csv_path, runs])
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_project(args, cfg: RunConfig) -> int:
    det = VraeDetector.load(_require(args.model))
    values, _, ts, _ = load_series(args.input)
    if np.isnan(values).any():
        values = preprocess(frame_from_array(values), cfg.preprocess.bins, cfg.preprocess.contamination).frame.values
    mu, starts = latent_export(det, values, cfg.detect.stride)
    coords = pca_project_2d(mu)
    csv_path = Path(args.out).with_suffix(".csv")
    svg_path = Path(args.out).with_suffix(".svg")
    write_projection(coords, [format_timestamp(ts[s]) for s in starts], csv_path, svg_path, "latent means")
    write_metadata(args.out, "project", cfg, [args.model, args.input], [csv_path, svg_path])
    print(f"projected {len(mu)} windows to {csv_path}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "detect": cmd_detect,
    "eval": cmd_eval, "ablate": cmd_ablate, "project": cmd_project,
}


def keys_help() -> str:
    desk = PRESETS["desk"]
    lines = ["config keys (section.key = default [origin]; desk preset value in braces):"]
    for sec, key, default, org in config_keys():
        dotted = f"{sec}.{key}"
        extra = f" {{desk: {desk[dotted]}}}" if dotted in desk else ""
        lines.append(f"  {dotted} = {default} [{org}]{extra}")
    lines.append("")
    lines.append("origins: published = reference hyperparameter value, chosen = our default, "
                 "plumbing = tooling only")
    lines.append(f"exit codes: {EXIT_OK} ok, {EXIT_VALIDATION} validation error, {EXIT_RUNTIME} runtime error")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"key=value config file with sections (also looked up in ${CONFIG_DIR_ENV})")
    common.add_argument("--preset", default="full", choices=sorted(PRESETS))
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="worker cap for neighbour search")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vraead", description="Variational recurrent autoencoder "
                                     "anomaly detection for hourly sensor series.",
                                     epilog=keys_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, epilog=keys_help(),
                              formatter_class=argparse.RawDescriptionHelpFormatter)

    p = add("synth", "generate the synthetic benchmark")
    p.add_argument("--out", required=True, help="output directory")
    p = add("preprocess", "repair gaps and pre-label global anomalies")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p = add("train", "train a detector and write a checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="per-iteration training log CSV")
    p = add("detect", "score a series with a trained checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", help="optional SVG plot of flagged timestamps")
    p = add("eval", "precision/recall/F1 report")
    p.add_argument("--labels", required=True, help="CSV with a label column")
    p.add_argument("--scores", action="append", metavar="NAME=PATH", help="score CSV from detect")
    p.add_argument("--train", help="training CSV; adds knn, pca and hbos rows")
    p.add_argument("--out", required=True, help="report path stem (.txt and .csv)")
    p = add("ablate", "four-way ablation over paired seeds")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p = add("project", "2-D projection of latent means")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.set, args.preset, args.seed)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return COMMANDS[args.command](args, cfg)
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
