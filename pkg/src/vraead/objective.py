"""Gaussian log-likelihood, diagonal-Gaussian KL and the masked ELBO+ loss."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import LOG_2PI, ContractError, Tensor
from .model import DecoderOutput, EncoderOutput, VariationalContext, masked_input


def _check_sigma(sigma: Tensor, what: str) -> None:
    if np.any(sigma.data <= 0):
        raise ContractError(f"{what}: sigma must be strictly positive")


def gaussian_logpdf(x: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Elementwise log N(x; mu, sigma^2), plain numpy (no graph)."""
    return -0.5 * LOG_2PI - np.log(sigma) - 0.5 * ((x - mu) / sigma) ** 2


def gaussian_log_likelihood(x, mu, sigma, beta=None) -> Tensor:
    """sum_t beta_t sum_d log N(x_td; mu_td, sigma_td^2).

    Accepts (W, n) or (B, W, n); the batched form returns one value per
    window. Masked steps contribute exactly zero, and the masked entries of
    ``x`` are never read.
    """
    mu, sigma = ag.as_tensor(mu), ag.as_tensor(sigma)
    _check_sigma(sigma, "gaussian_log_likelihood")
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.shape != mu.shape or sigma.shape != mu.shape:
        raise ag.ShapeError(f"x {x.shape}, mu {mu.shape}, sigma {sigma.shape} must agree")
    if beta is None:
        beta = np.ones(x.shape[:-1])
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != x.shape[:-1]:
        raise ag.ShapeError(f"beta {beta.shape} must match x without feature axis {x.shape[:-1]}")
    x = masked_input(x, beta)
    resid = (Tensor(x) - mu) / sigma
    terms = (-0.5 * LOG_2PI) - ag.log(sigma) - 0.5 * ag.square(resid)
    weights = np.broadcast_to(beta[..., None], x.shape).copy()
    masked = terms * Tensor(weights)
    axes = tuple(range(1, x.ndim)) if x.ndim == 3 else None
    return masked.sum(axis=axes)


def kl_diag_gaussian(mu, sigma, axis=None) -> Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)), summed over ``axis`` (all by default)."""
    mu, sigma = ag.as_tensor(mu), ag.as_tensor(sigma)
    _check_sigma(sigma, "kl_diag_gaussian")
    per = 0.5 * (ag.square(sigma) + ag.square(mu) - 1.0) - ag.log(sigma)
    return per.sum(axis=axis)


@dataclass
class LossBreakdown:
    recon: Tensor
    kl_z: Tensor
    kl_c_sum: Tensor
    elbo_plus: Tensor
    loss: Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("recon", "kl_z", "kl_c_sum", "elbo_plus", "loss")}


def elbo_plus(dec: DecoderOutput, enc: EncoderOutput, ctx: VariationalContext, x, beta,
              lambda_kl: float, eta_a: float) -> LossBreakdown:
    """Batch-mean ELBO+ = recon - lambda_kl * (KL_z + eta_a * sum_t KL_c_t).

    ``recon`` is the single-sample reparameterised estimate of the masked
    log-likelihood. Both KL terms are penalised.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    beta = np.ones(x.shape[:2]) if beta is None else np.asarray(beta, dtype=np.float64).reshape(x.shape[:2])
    recon = gaussian_log_likelihood(x, dec.mu_x, dec.sigma_x, beta).mean()
    kl_z = kl_diag_gaussian(enc.mu_z, enc.sigma_z, axis=-1).mean()
    # (B, W, H) -> sum over H and W, mean over the batch
    kl_c = kl_diag_gaussian(ctx.mu_c, ctx.sigma_c, axis=-1).sum(axis=-1).mean()
    elbo = recon - lambda_kl * (kl_z + eta_a * kl_c)
    return LossBreakdown(recon, kl_z, kl_c, elbo, -elbo)


class TrainingLogWriter:
    """Appends one CSV row per optimisation step."""

    columns = ("iteration", "recon", "kl_z", "kl_c_sum", "loss", "val_loss")

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", newline="") as fh:
            csv.writer(fh).writerow(self.columns)

    def append(self, row: dict) -> None:
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow(["" if row.get(c) is None else row.get(c) for c in self.columns])
