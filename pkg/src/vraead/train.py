"""Mini-batch Adam training with validation tracking and best-checkpoint selection."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autograd import no_grad
from .checkpoint import save_checkpoint
from .ingest import WindowBatch
from .model import VRAE
from .objective import LossBreakdown, TrainingLogWriter, elbo_plus
from .optim import AdamState, adam_step, clip_grad_norm, zero_grad

logger = logging.getLogger(__name__)

VAL_NOISE_OFFSET = 7919


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 550
    batch_size: int = 1024
    lr: float = 1e-4
    seed: int = 0
    eval_every: int = 50
    grad_clip: float = 5.0
    iteration_unit: str = "step"     # "step" or "epoch"
    val_max_windows: int = 512
    checkpoint_path: str | None = None
    log_path: str | None = None

    def validate(self) -> "TrainConfig":
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1 or self.lr <= 0 or self.eval_every < 1:
            raise ValueError("batch_size, lr and eval_every must be positive")
        if self.iteration_unit not in ("step", "epoch"):
            raise ValueError(f"iteration_unit must be 'step' or 'epoch', got {self.iteration_unit!r}")
        return self


def batch_loss(model: VRAE, windows: np.ndarray, beta: np.ndarray, rng: np.random.Generator) -> LossBreakdown:
    cfg = model.config
    r = model.forward(windows, beta, rng)
    return elbo_plus(r.dec, r.enc, r.ctx, windows, beta, cfg.lambda_kl, cfg.eta_a)


def _val_subset(val: WindowBatch | None, limit: int) -> WindowBatch | None:
    if val is None or len(val) == 0:
        return None
    if len(val) <= limit:
        return val
    idx = np.unique(np.linspace(0, len(val) - 1, limit).round().astype(int))
    return val.subset(idx)


def validation_loss(model: VRAE, val: WindowBatch, seed: int, chunk: int = 256) -> float:
    """Mean loss over ``val`` with sampling noise fixed by ``seed``."""
    rng = np.random.default_rng(seed)
    total = 0.0
    with no_grad():
        for s in range(0, len(val), chunk):
            lb = batch_loss(model, val.windows[s:s + chunk], val.beta[s:s + chunk], rng)
            total += lb.loss.item() * min(chunk, len(val) - s)
    return total / len(val)


def _check_finite(lb: LossBreakdown, iteration: int) -> None:
    vals = lb.as_floats()
    if math.isfinite(vals["loss"]):
        return
    bad = [k for k in ("recon", "kl_z", "kl_c_sum") if not math.isfinite(vals[k])] or ["loss"]
    raise TrainingDivergedError(f"non-finite loss at iteration {iteration}: offending term(s) {bad}")


def portable_config(cfg: TrainConfig) -> dict:
    """Training settings without output paths, so identical runs write identical bytes."""
    return {k: v for k, v in asdict(cfg).items() if k not in ("checkpoint_path", "log_path")}


def snapshot(model: VRAE) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in model.params.items()}


def restore(model: VRAE, arrays: dict[str, np.ndarray]) -> None:
    for k, p in model.params.items():
        p.data[...] = arrays[k]


def fit(model: VRAE, train: WindowBatch, val: WindowBatch | None, cfg: TrainConfig
        ) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Train in place; the model ends up holding the best-validation parameters.

    Returns those parameters and the per-iteration history.
    """
    cfg.validate()
    if len(train) == 0:
        raise ValueError("empty training batch")
    history: list[dict] = []
    best = snapshot(model)
    if cfg.iterations == 0:
        return best, history
    best_val = math.inf
    state = AdamState.create(model.params, lr=cfg.lr)
    shuffle_rng = np.random.default_rng(cfg.seed)
    noise_rng = np.random.default_rng(cfg.seed + 1)
    val_sub = _val_subset(val, cfg.val_max_windows)
    writer = TrainingLogWriter(cfg.log_path) if cfg.log_path else None
    N = len(train)
    bs = min(cfg.batch_size, N)
    steps_per_epoch = math.ceil(N / bs)
    total_steps = cfg.iterations * (steps_per_epoch if cfg.iteration_unit == "epoch" else 1)
    perm, cursor = shuffle_rng.permutation(N), 0
    epoch_rows: list[dict] = []
    zero_grad(model.params)
    for step in range(total_steps):
        if cursor >= N:
            perm, cursor = shuffle_rng.permutation(N), 0
        idx = np.sort(perm[cursor:cursor + bs])
        cursor += bs
        lb = batch_loss(model, train.windows[idx], train.beta[idx], noise_rng)
        _check_finite(lb, step)
        lb.loss.backward()
        clip_grad_norm(model.params, cfg.grad_clip)
        adam_step(model.params, state)
        row = {"iteration": step, **lb.as_floats(), "val_loss": None}

        if cfg.iteration_unit == "epoch":
            epoch_rows.append(row)
            if (step + 1) % steps_per_epoch != 0:
                continue
            it = (step + 1) // steps_per_epoch - 1
            row = {k: float(np.mean([r[k] for r in epoch_rows])) for k in
                   ("recon", "kl_z", "kl_c_sum", "elbo_plus", "loss")}
            row.update(iteration=it, val_loss=None)
            epoch_rows = []
        it = row["iteration"]
        if (it + 1) % cfg.eval_every == 0 or it == cfg.iterations - 1:
            score = validation_loss(model, val_sub, cfg.seed + VAL_NOISE_OFFSET) if val_sub else row["loss"]
            row["val_loss"] = score
            logger.info("iteration %d loss %.4f val %.4f", it, row["loss"], score)
            if score < best_val:
                best_val, best = score, snapshot(model)
        history.append(row)
        if writer:
            writer.append(row)
    restore(model, best)
    if cfg.checkpoint_path:
        save_checkpoint(cfg.checkpoint_path, best, model.config, {"train": portable_config(cfg)})
    return best, history
