"""Text-to-triplet generator: training under the combined objective with
scene-balanced batches, sampling, and checkpoint I/O."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from safetensors.torch import load_file, save_file

from tripletgen import sbca
from tripletgen.adapters import build_adapters, calib_loss, combined_loss, decode_triplet
from tripletgen.codecs import (MODALITIES, CodecConfig, ModalityCodec, check_shared_geometry,
                               concat_latents, split_latents, triplet_tensors)
from tripletgen.conditioning import (SceneGroups, SceneTokenTable, TextEncoder, Vocabulary, cluster_scenes,
                                     condition_batch, extract_scene_features)
from tripletgen.corpus import CorpusConfig, PromptRecord, Triplet
from tripletgen.diffusion import (Denoiser, DenoiserConfig, NoiseSchedule, build_schedule, denoise_terms,
                                  estimate_z0, generate_triplet_latents)
from tripletgen.errors import ConfigError, CorpusIOError, DataError

log = logging.getLogger(__name__)


@dataclass
class ScheduleConfig:
    kind: str = "linear"
    T_steps: int = 200
    beta_min: float = 1e-4
    beta_max: float = 0.05


@dataclass
class SBCAConfig:
    enabled: bool = True
    alpha: float = 0.5
    epsilon_floor: float = 0.05


@dataclass
class GeneratorConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    sbca: SBCAConfig = field(default_factory=SBCAConfig)
    cond_dim: int = 64
    K: int = 4
    adapter_hidden: int = 8
    lam: float = 0.5
    calib_at_full_denoise: bool = False
    two_stage: bool = False
    adapter_steps: int = 500
    cfg_dropout: float = 0.0
    guidance_scale: float = 1.0
    ema_decay: float = 0.999  # 0 disables the weight average used at sampling time
    steps: int = 4000
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 200
    seed: int = 0


class TripletGenerator(nn.Module):
    def __init__(self, vocab: Vocabulary, latent_shape, cfg: GeneratorConfig):
        super().__init__()
        self.vocab = vocab
        self.cfg = cfg
        self.latent_shape = tuple(latent_shape)
        self.schedule = build_schedule(cfg.schedule.kind, cfg.schedule.T_steps, cfg.schedule.beta_min,
                                       cfg.schedule.beta_max)
        self.text_encoder = TextEncoder(len(vocab), cfg.cond_dim)
        self.scene_table = SceneTokenTable(cfg.K, cfg.cond_dim)
        full = (3 * latent_shape[0], *latent_shape[1:])
        self.denoiser = Denoiser(full, cfg.cond_dim, vocab.max_len + 1, cfg.denoiser)
        self.adapters = build_adapters(latent_shape[0], cfg.adapter_hidden)
        # training-set conditions, used for automatic prompt drawing at sampling time
        self.groups: SceneGroups | None = None
        self.train_prompts: list[str] = []
        self.train_weights: np.ndarray | None = None
        self.steps_done = 0

    def condition(self, prompts, scene_ids, drop=None):
        ids = self.vocab.encode_batch(prompts)
        return condition_batch(ids, torch.as_tensor(scene_ids, dtype=torch.long), self.vocab, self.text_encoder,
                               self.scene_table, drop)

    def null_condition(self, n):
        ids = torch.tensor([self.vocab.null_ids()] * n)
        return condition_batch(ids, torch.ones(n, dtype=torch.long), self.vocab, self.text_encoder,
                               self.scene_table, torch.ones(n, dtype=torch.bool))

    def adapter_parameter_count(self) -> int:
        return sum(p.numel() for p in self.adapters.parameters())

    def denoiser_parameter_count(self) -> int:
        return sum(p.numel() for p in self.denoiser.parameters())


def encode_triplets(codecs: dict[str, ModalityCodec], triplets, batch=256) -> torch.Tensor:
    data = triplet_tensors(triplets)
    out = []
    with torch.no_grad():
        for i in range(0, len(triplets), batch):
            out.append(concat_latents(*(codecs[m].encode(data[m][i:i + batch]) for m in MODALITIES)))
    return torch.cat(out)


def scene_groups_for(triplets, K: int, seed: int) -> SceneGroups:
    return cluster_scenes(np.stack([extract_scene_features(t) for t in triplets]), K, seed)


def weight_table(triplets, groups: SceneGroups, cfg: SBCAConfig) -> sbca.SamplingWeightTable:
    class_lists = [t.class_ids() for t in triplets]
    if not cfg.enabled:
        return sbca.uniform_table(len(triplets))
    stats = sbca.compute_class_stats(class_lists, cfg.alpha, cfg.epsilon_floor)
    return sbca.compute_weights(stats, groups.assignment, class_lists, groups.K)


def _lr_at(step, cfg: GeneratorConfig, total):
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, total - cfg.warmup)
    return cfg.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))


def train_generator(triplets: list[Triplet], codecs: dict[str, ModalityCodec], corpus_cfg: CorpusConfig,
                    cfg: GeneratorConfig, log_path=None) -> tuple[TripletGenerator, list[dict]]:
    """Train denoiser, text/scene embeddings and adapters on ``triplets``.

    Batches come from the SBCA weight table (or uniformly when disabled).
    Returns the generator and its per-step log records.
    """
    if not triplets:
        raise DataError("cannot train a generator on an empty corpus")
    latent_shape = check_shared_geometry(codecs)
    torch.manual_seed(cfg.seed)
    gen = TripletGenerator(Vocabulary.from_corpus(corpus_cfg), latent_shape, cfg)
    z0_all = encode_triplets(codecs, triplets)
    groups = scene_groups_for(triplets, cfg.K, cfg.seed)
    table = weight_table(triplets, groups, cfg.sbca)
    prompts = [t.prompt.rendered for t in triplets]
    ids_all = gen.vocab.encode_batch(prompts)
    scene_all = torch.as_tensor(groups.assignment, dtype=torch.long)
    gen.groups, gen.train_prompts, gen.train_weights = groups, prompts, table.W.copy()

    sampler = sbca.WeightedSampler(table, cfg.batch_size, cfg.seed)
    rng = torch.Generator().manual_seed(cfg.seed + 1)
    main_params = [p for n, p in gen.named_parameters() if not n.startswith("adapters.")]
    adapter_params = list(gen.adapters.parameters())
    lam = 0.0 if cfg.two_stage else cfg.lam
    groups_ = [{"params": main_params}]
    if not cfg.two_stage:
        groups_.append({"params": adapter_params})
    opt = torch.optim.AdamW(groups_, lr=cfg.lr, weight_decay=0.0)
    records = []
    ema = {n: p.detach().clone() for n, p in gen.named_parameters()} if cfg.ema_decay > 0 else None
    fh = open(log_path, "a") if log_path else None
    t0 = time.time()
    try:
        gen.train()
        for step in range(cfg.steps):
            lr = _lr_at(step, cfg, cfg.steps)
            for g in opt.param_groups:
                g["lr"] = lr
            idx = torch.as_tensor(next(sampler))
            z0 = z0_all[idx]
            drop = None
            if cfg.cfg_dropout > 0:
                drop = torch.rand(len(idx), generator=rng) < cfg.cfg_dropout
            cond, pad = condition_batch(ids_all[idx], scene_all[idx], gen.vocab, gen.text_encoder,
                                        gen.scene_table, drop)
            terms = denoise_terms(gen.denoiser, z0, cond, pad, gen.schedule, rng)
            if cfg.calib_at_full_denoise:
                z0_hat, _ = generate_triplet_latents(gen.denoiser, cond.detach(), pad, gen.schedule, rng)
            else:
                z0_hat = estimate_z0(terms.z_t, terms.eps_hat, terms.t, gen.schedule)
            lc = calib_loss(gen.adapters, split_latents(z0_hat), split_latents(z0))
            loss = combined_loss(terms.loss, lc, lam)
            opt.zero_grad(set_to_none=True)
            loss.total.backward()
            opt.step()
            if ema is not None:
                _ema_update(ema, gen, min(cfg.ema_decay, (1 + step) / (10 + step)))
            rec = {"step": step + 1, "loss_denoise": terms.loss.item(), "loss_calib": lc.item(), "lr": lr}
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if (step + 1) % 250 == 0:
                recent = records[-250:]
                log.info("gen step %d denoise %.3f calib %.3f (%.0fs)", step + 1,
                         np.mean([r["loss_denoise"] for r in recent]), np.mean([r["loss_calib"] for r in recent]),
                         time.time() - t0)
        if ema is not None:
            with torch.no_grad():
                for n, p in gen.named_parameters():
                    p.copy_(ema[n])
        if cfg.two_stage:
            records += _train_adapters_only(gen, z0_all, ids_all, scene_all, sampler, rng, cfg, fh)
    finally:
        if fh:
            fh.close()
    gen.steps_done = len(records)
    gen.eval()
    return gen, records


@torch.no_grad()
def _ema_update(ema: dict, model: nn.Module, decay: float) -> None:
    for n, p in model.named_parameters():
        ema[n].mul_(decay).add_(p.detach(), alpha=1.0 - decay)


def _train_adapters_only(gen, z0_all, ids_all, scene_all, sampler, rng, cfg, fh):
    opt = torch.optim.AdamW(gen.adapters.parameters(), lr=cfg.lr, weight_decay=0.0)
    records = []
    for step in range(cfg.adapter_steps):
        idx = torch.as_tensor(next(sampler))
        z0 = z0_all[idx]
        with torch.no_grad():
            cond, pad = condition_batch(ids_all[idx], scene_all[idx], gen.vocab, gen.text_encoder, gen.scene_table)
            terms = denoise_terms(gen.denoiser, z0, cond, pad, gen.schedule, rng)
            z0_hat = estimate_z0(terms.z_t, terms.eps_hat, terms.t, gen.schedule)
        lc = calib_loss(gen.adapters, split_latents(z0_hat), split_latents(z0))
        opt.zero_grad(set_to_none=True)
        lc.backward()
        opt.step()
        rec = {"step": cfg.steps + step + 1, "loss_denoise": terms.loss.item(), "loss_calib": lc.item(),
               "lr": cfg.lr}
        records.append(rec)
        if fh:
            fh.write(json.dumps(rec) + "\n")
    return records


# --------------------------------------------------------------------------- sampling

def auto_conditions(gen: TripletGenerator, n: int, seed: int) -> tuple[list[str], list[int]]:
    """Draw (prompt, scene group) pairs from the training conditions using the
    generator's own training sampler weights."""
    if not gen.train_prompts or gen.train_weights is None:
        raise ConfigError("generator carries no training conditions; pass prompts explicitly")
    rng = np.random.default_rng(seed)
    p = gen.train_weights / gen.train_weights.sum()
    idx = rng.choice(len(p), size=n, replace=True, p=p)
    return [gen.train_prompts[i] for i in idx], [int(gen.groups.assignment[i]) for i in idx]


@torch.no_grad()
def sample_triplets(gen: TripletGenerator, codecs, prompts, scene_ids, seed: int, batch=256) -> list[Triplet]:
    if len(prompts) != len(scene_ids):
        raise ConfigError("need one scene id per prompt")
    rng = torch.Generator().manual_seed(seed)
    guidance = {}
    out = []
    for i in range(0, len(prompts), batch):
        p, s = prompts[i:i + batch], scene_ids[i:i + batch]
        cond, pad = gen.condition(p, s)
        if gen.cfg.guidance_scale != 1.0:
            nc, npad = gen.null_condition(len(p))
            guidance = {"null_cond": nc, "null_pad": npad, "guidance_scale": gen.cfg.guidance_scale}
        z0_hat, _ = generate_triplet_latents(gen.denoiser, cond, pad, gen.schedule, rng, **guidance)
        vis, ir, lab = decode_triplet(gen.adapters, codecs, z0_hat)
        vis = vis.permute(0, 2, 3, 1).double().numpy()
        ir = ir.permute(0, 2, 3, 1).double().numpy()
        lab = lab.numpy()
        for k in range(len(p)):
            out.append(Triplet(vis[k], ir[k], lab[k], PromptRecord.parse(p[k]), int(s[k])))
    return out


# --------------------------------------------------------------------------- checkpoints

def save_codecs(codecs: dict[str, ModalityCodec], directory, config_hash: str, cfg: CodecConfig) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for m, c in codecs.items():
        header = {"modality": m, "config_hash": config_hash, "n_classes": c.n_classes,
                  "image_size": list(c.image_size), "codec": asdict(cfg)}
        path = directory / f"codec_{m}.safetensors"
        save_file({k: v.contiguous() for k, v in c.state_dict().items()}, str(path),
                  metadata={"header": json.dumps(header)})
        paths.append(path)
    return paths


def _read(path):
    path = Path(path)
    try:
        from safetensors import safe_open
        with safe_open(str(path), framework="pt") as f:
            meta = json.loads(f.metadata()["header"])
        return load_file(str(path)), meta
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise CorpusIOError("missing or corrupt checkpoint", path) from exc


def load_codecs(directory) -> dict[str, ModalityCodec]:
    codecs = {}
    for m in MODALITIES:
        tensors, meta = _read(Path(directory) / f"codec_{m}.safetensors")
        cc = CodecConfig(**meta["codec"])
        codec = ModalityCodec(m, meta["n_classes"], tuple(meta["image_size"]), cc.depth, cc.latent_channels,
                              cc.width, cc.vae)
        codec.load_state_dict(tensors)
        codec.eval().requires_grad_(False)
        codecs[m] = codec
    check_shared_geometry(codecs)
    return codecs


def generator_config_from_dict(d: dict) -> GeneratorConfig:
    d = dict(d)
    d["schedule"] = ScheduleConfig(**d.get("schedule", {}))
    d["denoiser"] = DenoiserConfig(**d.get("denoiser", {}))
    d["sbca"] = SBCAConfig(**d.get("sbca", {}))
    return GeneratorConfig(**d)


def save_generator(gen: TripletGenerator, path, config_hash: str) -> Path:
    path = Path(path)
    header = {
        "config_hash": config_hash,
        "generator": asdict(gen.cfg),
        "latent_shape": list(gen.latent_shape),
        "vocab": gen.vocab.to_json(),
        "groups": gen.groups.to_json() if gen.groups is not None else None,
        "train_prompts": gen.train_prompts,
        "train_weights": gen.train_weights.tolist() if gen.train_weights is not None else None,
        "schedule": {"beta": gen.schedule.beta.tolist(), "sigma2": gen.schedule.sigma2.tolist()},
        "steps_done": gen.steps_done,
    }
    save_file({k: v.contiguous() for k, v in gen.state_dict().items()}, str(path),
              metadata={"header": json.dumps(header)})
    return path


def load_generator(path) -> TripletGenerator:
    tensors, meta = _read(path)
    cfg = generator_config_from_dict(meta["generator"])
    gen = TripletGenerator(Vocabulary.from_json(meta["vocab"]), tuple(meta["latent_shape"]), cfg)
    gen.load_state_dict(tensors)
    gen.schedule = NoiseSchedule(np.asarray(meta["schedule"]["beta"]), np.asarray(meta["schedule"]["sigma2"]))
    gen.groups = SceneGroups.from_json(meta["groups"]) if meta["groups"] else None
    gen.train_prompts = list(meta["train_prompts"])
    gen.train_weights = np.asarray(meta["train_weights"]) if meta["train_weights"] is not None else None
    gen.steps_done = meta["steps_done"]
    return gen.eval()
