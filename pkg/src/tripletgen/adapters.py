"""Residual latent adapters, the stop-gradient calibration loss, the combined
objective, and the triplet decode pipeline.

Adapters run once on the fully denoised latent, never inside the sampling
loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from tripletgen.codecs import MODALITIES, argmax_label, split_latents
from tripletgen.errors import ConfigError, ShapeError


class ResidualAdapter(nn.Module):
    """1x1 conv -> SiLU -> 1x1 conv, with the last layer zero-initialized."""

    def __init__(self, modality: str, channels: int, hidden: int = 8):
        super().__init__()
        if modality not in MODALITIES:
            raise ConfigError(f"unknown modality {modality!r}")
        self.modality = modality
        self.channels = channels
        self.net = nn.Sequential(nn.Conv2d(channels, hidden, 1), nn.SiLU(), nn.Conv2d(hidden, channels, 1))
        nn.init.zeros_(self.net[2].weight)
        nn.init.zeros_(self.net[2].bias)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != self.channels:
            raise ShapeError(f"{self.modality} adapter expects (B, {self.channels}, h, w), got {tuple(z.shape)}")
        return self.net(z)


def build_adapters(channels: int, hidden: int = 8) -> nn.ModuleDict:
    return nn.ModuleDict({m: ResidualAdapter(m, channels, hidden) for m in MODALITIES})


def calibrate(adapter: ResidualAdapter, z_hat: torch.Tensor, modality: str | None = None) -> torch.Tensor:
    if modality is not None and modality != adapter.modality:
        raise ConfigError(f"{adapter.modality} adapter applied to a {modality} latent")
    return z_hat + adapter(z_hat)


def calib_loss(adapters, predicted, targets) -> torch.Tensor:
    """Sum over modalities of ||sg(z_hat) + A(sg(z_hat)) - z||^2, averaged over the batch."""
    total = 0.0
    for m, z_hat, z in zip(MODALITIES, predicted, targets):
        if z_hat.shape != z.shape:
            raise ShapeError(f"{m}: predicted {tuple(z_hat.shape)} vs target {tuple(z.shape)}")
        sg = z_hat.detach()
        total = total + (calibrate(adapters[m], sg, m) - z).pow(2).flatten(1).sum(dim=1).mean()
    return total


@dataclass
class CombinedLoss:
    loss_denoise: torch.Tensor
    loss_calib: torch.Tensor
    lam: float

    @property
    def total(self) -> torch.Tensor:
        return self.loss_denoise + self.lam * self.loss_calib


def combined_loss(loss_denoise, loss_calib, lam: float) -> CombinedLoss:
    if lam < 0:
        raise ConfigError("lambda must be non-negative")
    return CombinedLoss(loss_denoise, loss_calib, lam)


@torch.no_grad()
def decode_triplet(adapters, codecs, z0_hat: torch.Tensor):
    """split -> calibrate (once per modality) -> decode -> argmax for the label."""
    z_v, z_i, z_l = split_latents(z0_hat)
    outs = {}
    for m, z in zip(MODALITIES, (z_v, z_i, z_l)):
        outs[m] = codecs[m].decode(calibrate(adapters[m], z, m))
    return outs["V"], outs["I"], argmax_label(outs["L"])
