"""Joint triplet latent diffusion: schedule, forward noising, the attention
denoiser over [time; condition; latent] tokens, ancestral sampling and the
noise-prediction loss.

Timesteps are 1-based (t = 1..T).  t = 0 is accepted by the closed-form
helpers and means "no noise" (alpha_bar_0 = 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from tripletgen.codecs import split_latents
from tripletgen.errors import ConfigError, NumericalError, ShapeError


@dataclass
class NoiseSchedule:
    beta: np.ndarray  # beta_1..beta_T
    sigma2: np.ndarray  # reverse-step variance per t

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.sigma2 = np.asarray(self.sigma2, dtype=np.float64)
        if self.beta.ndim != 1 or len(self.beta) < 1:
            raise ConfigError("schedule needs at least one step")
        if np.any(self.beta <= 0) or np.any(self.beta >= 1):
            raise ConfigError("every beta_t must lie in (0, 1)")
        if self.sigma2.shape != self.beta.shape:
            raise ConfigError("sigma2 must have one entry per step")

    @property
    def T(self) -> int:
        return len(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    def alpha_bar_at(self, t):
        """alpha_bar with the t = 0 convention (value 1)."""
        return np.concatenate([[1.0], self.alpha_bar])[t]

    def _gather(self, table: np.ndarray, t, like: torch.Tensor, allow_zero=False) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        lo = 0 if allow_zero else 1
        if t.numel() and (int(t.min()) < lo or int(t.max()) > self.T):
            raise ConfigError(f"timestep out of range [{lo}, {self.T}]")
        vals = torch.as_tensor(table, dtype=like.dtype)[t]
        if vals.dim() == 0:
            return vals
        return vals.view(-1, *([1] * (like.dim() - 1)))

    def coef(self, name: str, t, like: torch.Tensor) -> torch.Tensor:
        if name == "alpha_bar":
            return self._gather(np.concatenate([[1.0], self.alpha_bar]), t, like, allow_zero=True)
        table = {"beta": self.beta, "alpha": self.alpha, "sigma2": self.sigma2}[name]
        return self._gather(np.concatenate([[np.nan], table]), t, like)


def build_schedule(kind="linear", T_steps=200, beta_min=1e-4, beta_max=0.05, variance="beta") -> NoiseSchedule:
    if T_steps < 1:
        raise ConfigError("T_steps must be at least 1")
    if not 0 < beta_min <= beta_max < 1:
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if kind == "linear":
        beta = np.linspace(beta_min, beta_max, T_steps, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T_steps + 1, dtype=np.float64) / T_steps
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        beta = np.clip(1.0 - f[1:] / f[:-1], beta_min, beta_max)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    if variance == "beta":
        sigma2 = beta.copy()
    elif variance == "zero":
        sigma2 = np.zeros_like(beta)
    else:
        raise ConfigError(f"unknown variance rule {variance!r}")
    return NoiseSchedule(beta, sigma2)


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {tuple(z0.shape)} and noise {tuple(eps.shape)} differ")
    ab = schedule.coef("alpha_bar", t, z0)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def estimate_z0(z_t: torch.Tensor, eps_hat: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    ab = schedule.coef("alpha_bar", t, z_t)
    return (z_t - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt()


def reverse_mean(z_t: torch.Tensor, eps_hat: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    a = schedule.coef("alpha", t, z_t)
    ab = schedule.coef("alpha_bar", t, z_t)
    return (z_t - (1.0 - a) / (1.0 - ab).sqrt() * eps_hat) / a.sqrt()


# --------------------------------------------------------------------------- denoiser

def timestep_embedding(t: torch.Tensor, dim: int, dtype=torch.float32, max_period=10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=dtype) / max(half, 1))
    args = t.to(dtype)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Attention(nn.Module):
    def __init__(self, width, heads):
        super().__init__()
        if width % heads:
            raise ConfigError("width must be divisible by heads")
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x, pad_mask=None):
        B, N, C = x.shape
        q, k, v = self.qkv(x).view(B, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(C // self.heads)
        if pad_mask is not None:
            att = att.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        out = att.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, N, C))


class Block(nn.Module):
    def __init__(self, width, heads, mlp_ratio):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, width * mlp_ratio), nn.GELU(), nn.Linear(width * mlp_ratio, width))

    def forward(self, x, pad_mask=None):
        x = x + self.attn(self.ln1(x), pad_mask)
        return x + self.mlp(self.ln2(x))


@dataclass
class DenoiserConfig:
    width: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    positional: bool = True


class Denoiser(nn.Module):
    """Noise predictor over one token sequence: [time, condition..., latent patches...].

    Patch size is 1, so every latent token carries the V, I and L channels of
    one spatial cell.
    """

    def __init__(self, latent_shape, cond_dim: int, max_cond_len: int, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        C, h, w = latent_shape
        self.latent_shape = tuple(latent_shape)
        self.cond_dim = cond_dim
        self.max_cond_len = max_cond_len
        self.positional = cfg.positional
        W = cfg.width
        self.width = W
        self.in_proj = nn.Linear(C, W)
        self.pos = nn.Parameter(torch.randn(h * w, W) * 0.02)
        self.cond_proj = nn.Linear(cond_dim, W)
        self.cond_pos = nn.Parameter(torch.randn(max_cond_len, W) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(W, W), nn.SiLU(), nn.Linear(W, W))
        self.blocks = nn.ModuleList([Block(W, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        self.ln_out = nn.LayerNorm(W)
        self.out = nn.Linear(W, C)

    def forward(self, z_t: torch.Tensor, cond: torch.Tensor, cond_pad: torch.Tensor | None, t) -> torch.Tensor:
        B = z_t.shape[0]
        if tuple(z_t.shape[1:]) != self.latent_shape:
            raise ShapeError(f"latent must be (B, {self.latent_shape}), got {tuple(z_t.shape)}")
        if cond.dim() != 3 or cond.shape[0] != B or cond.shape[2] != self.cond_dim or cond.shape[1] > self.max_cond_len:
            raise ShapeError(f"condition must be (B, <= {self.max_cond_len}, {self.cond_dim}), got {tuple(cond.shape)}")
        C, h, w = self.latent_shape
        t = torch.as_tensor(t, dtype=torch.long).expand(B) if torch.as_tensor(t).dim() == 0 else torch.as_tensor(t)
        x = self.in_proj(z_t.flatten(2).transpose(1, 2)) + self.pos
        c = self.cond_proj(cond)
        if self.positional:
            c = c + self.cond_pos[: cond.shape[1]]
        tt = self.time_mlp(timestep_embedding(t, self.width, z_t.dtype))[:, None]
        seq = torch.cat([tt, c, x], dim=1)
        mask = None
        if cond_pad is not None:
            free = torch.zeros(B, 1, dtype=torch.bool)
            mask = torch.cat([free, cond_pad, torch.zeros(B, h * w, dtype=torch.bool)], dim=1)
        for blk in self.blocks:
            seq = blk(seq, mask)
        out = self.out(self.ln_out(seq[:, -h * w:]))
        return out.transpose(1, 2).reshape(B, C, h, w)


def predict_noise(denoiser, z_t, cond, cond_pad, t) -> torch.Tensor:
    eps_hat = denoiser(z_t, cond, cond_pad, t)
    if eps_hat.shape != z_t.shape:
        raise ShapeError(f"denoiser returned {tuple(eps_hat.shape)} for latent {tuple(z_t.shape)}")
    return eps_hat


def guided_noise(denoiser, z_t, cond, cond_pad, t, null_cond=None, null_pad=None, guidance_scale=1.0):
    eps = predict_noise(denoiser, z_t, cond, cond_pad, t)
    if null_cond is None or guidance_scale == 1.0:
        return eps
    eps_null = predict_noise(denoiser, z_t, null_cond, null_pad, t)
    return eps_null + guidance_scale * (eps - eps_null)


def sample_step(denoiser, z_t, cond, cond_pad, t: int, schedule: NoiseSchedule, rng: torch.Generator,
                **guidance) -> torch.Tensor:
    if t < 1:
        raise ConfigError("sample_step needs t >= 1")
    eps_hat = guided_noise(denoiser, z_t, cond, cond_pad, t, **guidance)
    mu = reverse_mean(z_t, eps_hat, t, schedule)
    if t == 1:
        return mu
    sigma = math.sqrt(schedule.sigma2[t - 1])
    return mu + sigma * torch.randn(z_t.shape, generator=rng, dtype=z_t.dtype)


@torch.no_grad()
def generate_triplet_latents(denoiser, cond, cond_pad, schedule: NoiseSchedule, rng: torch.Generator,
                             z_T: torch.Tensor | None = None, **guidance):
    """Full ancestral chain from z_T ~ N(0, I); returns (z0_hat, (z_V, z_I, z_L))."""
    B = cond.shape[0]
    z = z_T if z_T is not None else torch.randn((B, *denoiser.latent_shape), generator=rng, dtype=cond.dtype)
    for t in range(schedule.T, 0, -1):
        z = sample_step(denoiser, z, cond, cond_pad, t, schedule, rng, **guidance)
    return z, split_latents(z)


@dataclass
class DenoiseTerms:
    loss: torch.Tensor
    z_t: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    eps_hat: torch.Tensor


def denoise_terms(denoiser, z0, cond, cond_pad, schedule: NoiseSchedule, rng: torch.Generator,
                  t=None, eps=None) -> DenoiseTerms:
    """Per-item t ~ U{1..T} and eps ~ N(0, I); loss = batch mean of ||eps_hat - eps||^2."""
    B = z0.shape[0]
    if B == 0:
        raise ConfigError("denoise loss needs a non-empty batch")
    if t is None:
        t = torch.randint(1, schedule.T + 1, (B,), generator=rng)
    if eps is None:
        eps = torch.randn(z0.shape, generator=rng, dtype=z0.dtype)
    z_t = forward_diffuse(z0, t, eps, schedule)
    eps_hat = predict_noise(denoiser, z_t, cond, cond_pad, t)
    loss = (eps_hat - eps).pow(2).flatten(1).sum(dim=1).mean()
    if not torch.isfinite(loss):
        raise NumericalError(f"denoise loss is not finite ({loss.item()})")
    return DenoiseTerms(loss, z_t, torch.as_tensor(t), eps, eps_hat)


def denoise_loss(denoiser, z0, cond, cond_pad, schedule, rng, **kw) -> torch.Tensor:
    return denoise_terms(denoiser, z0, cond, cond_pad, schedule, rng, **kw).loss
