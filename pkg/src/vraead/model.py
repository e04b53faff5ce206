"""Variational recurrent autoencoder with variational self-attention.

Layout of one forward pass for a batch of windows x (B, W, n)::

    encoder LSTM stack      x -> s_1..s_W                  (B, W, H)
    latent heads            s_W -> mu_z, sigma_z           (B, K)
    self-attention          alpha = softmax(s s^T / sqrt(H)), c_det = alpha s
    context heads           c_det -> mu_c, sigma_c         (B, W, H)
    reparameterisation      z = mu_z + sigma_z * eps, c_t = mu_c + sigma_c * eps
    decoder LSTM stack      concat(z, c_t) -> h_t          (B, W, H)
    output heads            h_t -> mu_x, sigma_x           (B, W, n)

Timesteps with beta == 0 are replaced by zeros before they reach the
encoder, so a masked value can influence neither the latent code nor the
loss.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import ContractError, ShapeError, Tensor


@dataclass
class ModelConfig:
    window: int = 168
    n_features: int = 1
    hidden: int = 218
    layers: int = 2
    latent: int = 3
    mc_samples: int = 10
    lambda_kl: float = 0.01
    eta_a: float = 0.01
    seed: int = 0

    def validate(self) -> "ModelConfig":
        for f in fields(self):
            if f.name == "seed":
                continue
            if getattr(self, f.name) <= 0:
                raise ValueError(f"ModelConfig.{f.name} must be positive, got {getattr(self, f.name)}")
        if self.latent > self.hidden:
            raise ValueError(f"latent ({self.latent}) must not exceed hidden ({self.hidden})")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    # parameters that change tensor shapes; a checkpoint must agree on these
    def architecture(self) -> dict:
        return {k: getattr(self, k) for k in ("window", "n_features", "hidden", "layers", "latent")}


@dataclass
class EncoderOutput:
    states: Tensor      # (B, W, H) last encoder layer
    mu_z: Tensor        # (B, K)
    sigma_z: Tensor     # (B, K)


@dataclass
class VariationalContext:
    alpha: Tensor       # (B, W, W), rows sum to one
    c_det: Tensor       # (B, W, H)
    mu_c: Tensor
    sigma_c: Tensor
    c: Tensor           # sampled contexts


@dataclass
class DecoderOutput:
    mu_x: Tensor        # (B, W, n)
    sigma_x: Tensor


@dataclass
class ForwardResult:
    enc: EncoderOutput
    ctx: VariationalContext
    z: Tensor
    dec: DecoderOutput


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_lstm(rng, prefix: str, d_in: int, hidden: int) -> dict[str, np.ndarray]:
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate
    return {
        f"{prefix}.Wx": xavier_uniform(rng, d_in, 4 * hidden),
        f"{prefix}.Wh": xavier_uniform(rng, hidden, 4 * hidden),
        f"{prefix}.b": b,
    }


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    H, K, n = cfg.hidden, cfg.latent, cfg.n_features
    raw: dict[str, np.ndarray] = {}
    for layer in range(cfg.layers):
        raw.update(init_lstm(rng, f"enc.lstm{layer}", n if layer == 0 else H, H))

    def head(name, d_in, d_out):
        raw[f"{name}.W"] = xavier_uniform(rng, d_in, d_out)
        raw[f"{name}.b"] = np.zeros(d_out)

    head("enc.mu_z", H, K)
    head("enc.sigma_z", H, K)
    head("att.mu_c", H, H)
    head("att.sigma_c", H, H)
    for layer in range(cfg.layers):
        raw.update(init_lstm(rng, f"dec.lstm{layer}", K + H if layer == 0 else H, H))
    head("dec.mu_x", H, n)
    head("dec.sigma_x", H, n)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


def lstm_forward(inputs: Tensor, Wx: Tensor, Wh: Tensor, b: Tensor,
                 extra_proj: Tensor | None = None) -> list[Tensor]:
    """Run one LSTM layer over (B, T, d) inputs from zero initial state.

    ``extra_proj`` (B, 4H) is added to every step's pre-activation; the
    decoder uses it for the latent code, which is identical at every step.
    Returns the per-step hidden states, each (B, H).
    """
    if inputs.ndim != 3 or inputs.shape[-1] != Wx.shape[0]:
        raise ShapeError(f"lstm_forward: inputs {inputs.shape} incompatible with Wx {Wx.shape}")
    B, T, _ = inputs.shape
    H = Wh.shape[0]
    xproj = ag.linear(inputs, Wx, b)
    h = None
    c = Tensor(np.zeros((B, H)))
    states = []
    for t in range(T):
        pre = xproj[:, t]
        if extra_proj is not None:
            pre = pre + extra_proj
        if h is not None:
            pre = pre + h @ Wh
        hc = ag.lstm_cell(pre, c)
        h, c = hc[:, :H], hc[:, H:]
        states.append(h)
    return states


def _as_batch(x) -> tuple[np.ndarray, bool]:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None], True
    if arr.ndim != 3:
        raise ShapeError(f"expected (W, n) or (B, W, n) input, got shape {arr.shape}")
    return arr, False


def masked_input(x: np.ndarray, beta: np.ndarray | None) -> np.ndarray:
    """Replace masked timesteps by +0.0 (never touches the original values)."""
    if beta is None:
        return x
    return np.where(beta[..., None] > 0, x, 0.0)


class VRAE:
    """Encoder, variational self-attention and decoder sharing one parameter dict."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config.validate()
        self.params = params if params is not None else init_params(config)

    # -- pieces ------------------------------------------------------------
    def encode(self, x, beta=None) -> EncoderOutput:
        cfg, p = self.config, self.params
        arr, _ = _as_batch(x)
        if arr.shape[1:] != (cfg.window, cfg.n_features):
            raise ShapeError(f"encode: window shape {arr.shape[1:]} != "
                             f"({cfg.window}, {cfg.n_features})")
        beta_arr = None if beta is None else np.asarray(beta, dtype=np.float64).reshape(arr.shape[:2])
        layer_in = Tensor(masked_input(arr, beta_arr))
        states = None
        for layer in range(cfg.layers):
            pre = f"enc.lstm{layer}"
            states = lstm_forward(layer_in, p[f"{pre}.Wx"], p[f"{pre}.Wh"], p[f"{pre}.b"])
            layer_in = ag.stack(states, axis=1)
        last = states[-1]
        mu_z = ag.linear(last, p["enc.mu_z.W"], p["enc.mu_z.b"])
        sigma_z = ag.softplus(ag.linear(last, p["enc.sigma_z.W"], p["enc.sigma_z.b"]))
        return EncoderOutput(layer_in, mu_z, sigma_z)

    @staticmethod
    def attention(states: Tensor) -> tuple[Tensor, Tensor]:
        """Scaled dot-product self-attention with query s_t over all s_i."""
        H = states.shape[-1]
        scores = ag.matmul(states, ag.transpose(states, (0, 2, 1))) * (1.0 / math.sqrt(H))
        alpha = ag.softmax(scores, axis=-1)
        return alpha, ag.matmul(alpha, states)

    def variational_context(self, alpha: Tensor, c_det: Tensor, eps: np.ndarray | None,
                            sigma_override: float | None = None) -> VariationalContext:
        p = self.params
        mu_c = ag.linear(c_det, p["att.mu_c.W"], p["att.mu_c.b"])
        if sigma_override is not None:
            sigma_c = Tensor(np.full(mu_c.shape, float(sigma_override)))
        else:
            sigma_c = ag.softplus(ag.linear(c_det, p["att.sigma_c.W"], p["att.sigma_c.b"]))
        c = mu_c if eps is None else mu_c + sigma_c * Tensor(eps)
        return VariationalContext(alpha, c_det, mu_c, sigma_c, c)

    def decode(self, z: Tensor, contexts: Tensor) -> DecoderOutput:
        cfg, p = self.config, self.params
        z, contexts = ag.as_tensor(z), ag.as_tensor(contexts)
        if z.ndim == 1:
            z = z.reshape(1, -1)
        if contexts.ndim == 2:
            contexts = contexts.reshape(1, *contexts.shape)
        K, H = cfg.latent, cfg.hidden
        if z.shape[-1] != K or contexts.shape[1:] != (cfg.window, H) or z.shape[0] != contexts.shape[0]:
            raise ShapeError(f"decode: z {z.shape} / contexts {contexts.shape} do not match "
                             f"K={K}, W={cfg.window}, H={H}")
        # concat(z, c_t) @ Wx == z @ Wx[:K] + c_t @ Wx[K:]; z's share is step-invariant
        Wx = p["dec.lstm0.Wx"]
        zproj = ag.linear(z, Wx[:K], p["dec.lstm0.b"])
        states = lstm_forward(contexts, Wx[K:], p["dec.lstm0.Wh"], Tensor(np.zeros(4 * H)),
                              extra_proj=zproj)
        for layer in range(1, cfg.layers):
            pre = f"dec.lstm{layer}"
            states = lstm_forward(ag.stack(states, axis=1), p[f"{pre}.Wx"], p[f"{pre}.Wh"], p[f"{pre}.b"])
        hs = ag.stack(states, axis=1)
        mu_x = ag.linear(hs, p["dec.mu_x.W"], p["dec.mu_x.b"])
        sigma_x = ag.softplus(ag.linear(hs, p["dec.sigma_x.W"], p["dec.sigma_x.b"]))
        return DecoderOutput(mu_x, sigma_x)

    # -- full pass -----------------------------------------------------------
    def forward(self, x, beta=None, rng: np.random.Generator | None = None,
                sigma_c_override: float | None = None, enc: EncoderOutput | None = None,
                alpha_cdet: tuple[Tensor, Tensor] | None = None) -> ForwardResult:
        """One stochastic pass. ``rng=None`` uses the posterior means (no noise).

        ``enc`` / ``alpha_cdet`` let callers reuse the deterministic encoder
        half when drawing several samples for the same windows.
        """
        if enc is None:
            enc = self.encode(x, beta)
        alpha, c_det = alpha_cdet if alpha_cdet is not None else self.attention(enc.states)
        B = enc.mu_z.shape[0]
        if rng is None:
            eps_z = eps_c = None
        else:
            eps_z = rng.standard_normal((B, self.config.latent))
            eps_c = rng.standard_normal(c_det.shape)
        ctx = self.variational_context(alpha, c_det, eps_c, sigma_c_override)
        z = enc.mu_z if eps_z is None else reparameterize(enc.mu_z, enc.sigma_z, eps=eps_z)
        return ForwardResult(enc, ctx, z, self.decode(z, ctx.c))

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())


def reparameterize(mu, sigma, rng: np.random.Generator | None = None,
                   eps: np.ndarray | None = None) -> Tensor:
    """z = mu + sigma * eps with eps ~ N(0, I); gradients reach mu and sigma only."""
    mu, sigma = ag.as_tensor(mu), ag.as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise ContractError("reparameterize: sigma must be strictly positive")
    if eps is None:
        if rng is None:
            raise ContractError("reparameterize needs either rng or eps")
        eps = rng.standard_normal(mu.shape)
    return mu + sigma * Tensor(eps)
