"""Adam optimizer and gradient utilities over named parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autograd import ContractError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    initialized: bool = False

    @classmethod
    def create(cls, params: Mapping[str, Tensor], lr: float = 1e-4, **kw) -> "AdamState":
        state = cls(lr=lr, **kw)
        state.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        state.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        state.initialized = True
        return state


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


def global_grad_norm(params: Mapping[str, Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values())))


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    """Rescale all adjoints in place so their joint L2 norm is at most ``max_norm``."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            p.grad *= scale
    return norm


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update, then zero every adjoint."""
    if not state.initialized:
        raise ContractError("AdamState not initialized; use AdamState.create(params)")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no adjoint buffer")
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise ContractError(f"moment shape {m.shape} != parameter shape {p.shape} for {name!r}")
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = np.zeros_like(p.data)
