"""Per-modality autoencoders mapping VIS / IR / Label to a shared latent grid.

All three codecs share an architecture and a latent geometry but never
weights.  Latents are reported in a normalized space (per-channel shift and
scale fitted on the training set) so that the diffusion model sees roughly
unit-variance inputs.  The label codec consumes one-hot maps and decodes to
logits; ``argmax_label`` turns logits into a class map.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from tripletgen.errors import ConfigError, DataError, NumericalError, ShapeError

log = logging.getLogger(__name__)

MODALITIES = ("V", "I", "L")


@dataclass
class CodecConfig:
    depth: int = 3
    latent_channels: int = 4
    width: int = 32
    steps: int = 2000
    batch_size: int = 32
    lr: float = 2e-3
    vae: bool = False
    kl_weight: float = 1e-4
    latent_noise: float = 0.05
    seed: int = 0


def _block(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.SiLU())


class ModalityCodec(nn.Module):
    def __init__(self, modality: str, n_classes: int, image_size=(64, 64), depth=3, latent_channels=4,
                 width=32, vae=False):
        super().__init__()
        if modality not in MODALITIES:
            raise ConfigError(f"unknown modality {modality!r}")
        H, W = image_size
        if H % 2 ** depth or W % 2 ** depth:
            raise ConfigError(f"image size {image_size} is not divisible by 2**{depth}")
        self.modality = modality
        self.n_classes = n_classes
        self.image_size = (H, W)
        self.depth = depth
        self.latent_channels = latent_channels
        self.vae = vae
        self.in_channels = {"V": 3, "I": 1, "L": n_classes + 1}[modality]
        self.out_channels = self.in_channels

        widths = [width * 2 ** i for i in range(depth + 1)]
        enc = [nn.Conv2d(self.in_channels, widths[0], 3, padding=1), nn.SiLU()]
        for i in range(depth):
            enc.append(_block(widths[i], widths[i + 1], stride=2))
        enc.append(nn.Conv2d(widths[-1], latent_channels * (2 if vae else 1), 1))
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(latent_channels, widths[-1], 3, padding=1), nn.SiLU()]
        for i in reversed(range(depth)):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), _block(widths[i + 1], widths[i])]
        dec.append(nn.Conv2d(widths[0], self.out_channels, 3, padding=1))
        self.decoder = nn.Sequential(*dec)

        self.register_buffer("shift", torch.zeros(latent_channels))
        self.register_buffer("scale", torch.ones(latent_channels))

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        H, W = self.image_size
        return (self.latent_channels, H // 2 ** self.depth, W // 2 ** self.depth)

    def prepare_input(self, x: torch.Tensor) -> torch.Tensor:
        H, W = self.image_size
        if self.modality == "L":
            if x.dim() != 3 or tuple(x.shape[1:]) != (H, W):
                raise ShapeError(f"label batch must be (B, {H}, {W}), got {tuple(x.shape)}")
            x = x.long()
            if x.numel() and (int(x.min()) < 0 or int(x.max()) > self.n_classes):
                raise DataError(f"label values must lie in [0, {self.n_classes}]")
            return F.one_hot(x, self.n_classes + 1).permute(0, 3, 1, 2).to(self.shift.dtype)
        if x.dim() != 4 or tuple(x.shape[1:]) != (self.in_channels, H, W):
            raise ShapeError(f"{self.modality} batch must be (B, {self.in_channels}, {H}, {W}), "
                             f"got {tuple(x.shape)}")
        return x.to(self.shift.dtype)

    def encode_raw(self, x, sample=False):
        """Un-normalized encoder output; returns (latent, mean, logvar)."""
        h = self.encoder(self.prepare_input(x))
        if not self.vae:
            return h, h, None
        mean, logvar = h.chunk(2, dim=1)
        logvar = logvar.clamp(-12.0, 8.0)
        if sample:
            return mean + torch.randn_like(mean) * (0.5 * logvar).exp(), mean, logvar
        return mean, mean, logvar

    def encode(self, x, sample=False) -> torch.Tensor:
        z, _, _ = self.encode_raw(x, sample=sample)
        return (z - self.shift[:, None, None]) / self.scale[:, None, None]

    def decode_raw(self, z_raw):
        return self.decoder(z_raw)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if tuple(z.shape[1:]) != self.latent_shape:
            raise ShapeError(f"latent must be (B, {self.latent_shape}), got {tuple(z.shape)}")
        out = self.decoder(z * self.scale[:, None, None] + self.shift[:, None, None])
        if self.modality == "L":
            return out
        return out.clamp(0.0, 1.0)


def encode(codec: ModalityCodec, x, sample=False) -> torch.Tensor:
    return codec.encode(x, sample=sample)


def decode(codec: ModalityCodec, z) -> torch.Tensor:
    return codec.decode(z)


def argmax_label(logits: torch.Tensor) -> torch.Tensor:
    return logits.argmax(dim=1).to(torch.uint8)


def build_codecs(n_classes: int, image_size, cfg: CodecConfig) -> dict[str, ModalityCodec]:
    codecs = {m: ModalityCodec(m, n_classes, image_size, cfg.depth, cfg.latent_channels, cfg.width, cfg.vae)
              for m in MODALITIES}
    check_shared_geometry(codecs)
    return codecs


def check_shared_geometry(codecs: dict[str, ModalityCodec]) -> tuple[int, int, int]:
    shapes = {m: c.latent_shape for m, c in codecs.items()}
    if len(set(shapes.values())) != 1:
        raise ConfigError(f"codecs disagree on latent shape: {shapes}")
    return next(iter(shapes.values()))


def concat_latents(z_v: torch.Tensor, z_i: torch.Tensor, z_l: torch.Tensor) -> torch.Tensor:
    if not (z_v.shape == z_i.shape == z_l.shape):
        raise ShapeError(f"latent shapes differ: {tuple(z_v.shape)}, {tuple(z_i.shape)}, {tuple(z_l.shape)}")
    return torch.cat([z_v, z_i, z_l], dim=1)


def split_latents(z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if z.shape[1] % 3:
        raise ShapeError(f"channel count {z.shape[1]} is not divisible by 3")
    c = z.shape[1] // 3
    return z[:, :c], z[:, c:2 * c], z[:, 2 * c:]


def kl_term(mean, logvar) -> torch.Tensor:
    return 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=(1, 2, 3)).mean()


def triplet_tensors(triplets) -> dict[str, torch.Tensor]:
    """Stack triplets into NCHW float tensors (V, I) and an integer label batch (L)."""
    vis = torch.from_numpy(np.stack([t.vis for t in triplets])).permute(0, 3, 1, 2).float()
    ir = torch.from_numpy(np.stack([t.ir for t in triplets])).permute(0, 3, 1, 2).float()
    lab = torch.from_numpy(np.stack([t.label for t in triplets]).astype(np.int64))
    return {"V": vis, "I": ir, "L": lab}


def reconstruction_loss(codec: ModalityCodec, x, out_raw) -> torch.Tensor:
    if codec.modality == "L":
        return F.cross_entropy(out_raw, x.long())
    return F.mse_loss(out_raw, x)


def _flip(x: torch.Tensor, flags: torch.Tensor) -> torch.Tensor:
    return torch.where(flags.view(-1, *([1] * (x.dim() - 1))), x.flip(-1), x)


def train_codec(codec: ModalityCodec, data: torch.Tensor, cfg: CodecConfig, seed: int) -> list[float]:
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    opt = torch.optim.AdamW(codec.parameters(), lr=cfg.lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps, eta_min=cfg.lr * 0.05)
    n = data.shape[0]
    history = []
    running = 0.0
    codec.train()
    for step in range(cfg.steps):
        idx = torch.randint(0, n, (min(cfg.batch_size, n),), generator=gen)
        x = _flip(data[idx], torch.rand(len(idx), generator=gen) < 0.5)
        z, mean, logvar = codec.encode_raw(x, sample=cfg.vae)
        if cfg.latent_noise > 0:
            z = z + cfg.latent_noise * z.detach().std() * torch.randn(z.shape, generator=gen)
        loss = reconstruction_loss(codec, x, codec.decode_raw(z))
        if cfg.vae:
            kl = kl_term(mean, logvar)
            if kl.item() < 0:
                raise NumericalError(f"negative KL term {kl.item()} in {codec.modality} codec")
            loss = loss + cfg.kl_weight * kl
        if not torch.isfinite(loss):
            raise NumericalError(f"{codec.modality} codec diverged at step {step} (loss={loss.item()})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        running += loss.item()
        if (step + 1) % 100 == 0 or step + 1 == cfg.steps:
            count = (step % 100) + 1
            history.append(running / count)
            log.info("codec %s step %d loss %.5f", codec.modality, step + 1, running / count)
            running = 0.0
    codec.eval()
    fit_normalization(codec, data)
    return history


@torch.no_grad()
def fit_normalization(codec: ModalityCodec, data: torch.Tensor, batch=256) -> None:
    zs = torch.cat([codec.encode_raw(data[i:i + batch])[0] for i in range(0, len(data), batch)])
    codec.shift.copy_(zs.mean(dim=(0, 2, 3)))
    codec.scale.copy_(zs.std(dim=(0, 2, 3)).clamp_min(1e-6))


def train_codecs(triplets, n_classes: int, cfg: CodecConfig) -> tuple[dict[str, ModalityCodec], dict]:
    """Train V, I and L codecs on a list of triplets; returns codecs and per-modality loss curves."""
    if not triplets:
        raise DataError("cannot train codecs on an empty corpus")
    size = triplets[0].label.shape
    data = triplet_tensors(triplets)
    codecs, curves = {}, {}
    for k, m in enumerate(MODALITIES):
        torch.manual_seed(cfg.seed * 31 + k)
        codecs[m] = ModalityCodec(m, n_classes, size, cfg.depth, cfg.latent_channels, cfg.width, cfg.vae)
        curves[m] = train_codec(codecs[m], data[m], cfg, seed=cfg.seed * 31 + k)
    check_shared_geometry(codecs)
    for c in codecs.values():
        c.requires_grad_(False)
    return codecs, curves


@torch.no_grad()
def reconstruction_report(codecs: dict[str, ModalityCodec], triplets, batch=128) -> dict[str, float]:
    data = triplet_tensors(triplets)
    se = {"V": 0.0, "I": 0.0}
    correct = 0
    for i in range(0, len(triplets), batch):
        for m in ("V", "I"):
            x = data[m][i:i + batch]
            se[m] += F.mse_loss(codecs[m].decode(codecs[m].encode(x)), x, reduction="sum").item()
        lab = data["L"][i:i + batch]
        pred = argmax_label(codecs["L"].decode(codecs["L"].encode(lab)))
        correct += (pred.long() == lab).sum().item()
    n_pix = data["L"].numel()
    return {"vis_mse": se["V"] / (n_pix * 3), "ir_mse": se["I"] / n_pix, "label_acc": correct / n_pix}
