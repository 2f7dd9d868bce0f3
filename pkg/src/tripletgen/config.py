"""Run configuration: one YAML document, dotted-key overrides, stable hash."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from tripletgen._util import digest, to_jsonable
from tripletgen.codecs import CodecConfig
from tripletgen.corpus import CorpusConfig, default_corpus_config
from tripletgen.diffusion import DenoiserConfig
from tripletgen.errors import ConfigError
from tripletgen.eval import SegConfig
from tripletgen.generator import GeneratorConfig, ScheduleConfig, SBCAConfig, generator_config_from_dict


@dataclass
class CorpusSection:
    spec: CorpusConfig = field(default_factory=default_corpus_config)
    n_train: int = 342
    n_val: int = 85
    n_test: int = 142
    seed: int = 0


@dataclass
class EvalSection:
    regimes: list = field(default_factory=lambda: ["real", "syn", "real+syn"])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    syn_multiples: list = field(default_factory=lambda: [1, 10, 20])
    ratios: list = field(default_factory=lambda: [0.25, 0.5, 1.0])
    alphas: list = field(default_factory=lambda: [0.0, 0.5, 1.0])
    lambdas: list = field(default_factory=lambda: [0.0, 0.1, 1.0])
    n_shuffles: int = 200


@dataclass
class RunConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    codec: CodecConfig = field(default_factory=CodecConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    seg: SegConfig = field(default_factory=SegConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return to_jsonable(self)

    def hash(self) -> str:
        return digest(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        try:
            c = d.get("corpus", {})
            corpus = CorpusSection(**{**c, "spec": CorpusConfig.from_dict(c["spec"])} if "spec" in c else c)
            return cls(corpus=corpus, codec=CodecConfig(**d.get("codec", {})),
                       generator=generator_config_from_dict(d.get("generator", {})),
                       seg=SegConfig(**d.get("seg", {})), eval=EvalSection(**d.get("eval", {})))
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc


def tiny_run_config() -> RunConfig:
    """Reference desk-scale configuration: 32x32 images, 8x8x4 latents, T = 50."""
    return RunConfig(
        corpus=CorpusSection(spec=default_corpus_config((32, 32))),
        codec=CodecConfig(depth=2, latent_channels=4, width=16, steps=1500),
        generator=GeneratorConfig(schedule=ScheduleConfig("linear", 50, 1e-3, 0.2),
                                  denoiser=DenoiserConfig(width=96, depth=3, heads=4, mlp_ratio=2),
                                  cond_dim=64, steps=4000),
        seg=SegConfig(steps=600),
    )


PRESETS = {"default": RunConfig, "tiny": tiny_run_config}


def apply_override(d: dict, key: str, value) -> None:
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def load_config(path=None, preset="tiny", overrides=()) -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    d = PRESETS[preset]().to_dict()
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        _merge(d, doc, "")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        apply_override(d, key.strip(), yaml.safe_load(raw))
    return RunConfig.from_dict(d)


def _merge(base: dict, new: dict, prefix: str) -> None:
    for k, v in new.items():
        if k not in base:
            raise ConfigError(f"unknown config key {prefix + k!r}")
        if isinstance(v, dict) and isinstance(base[k], dict) and k != "spec":
            _merge(base[k], v, prefix + k + ".")
        else:
            base[k] = v


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def replace(cfg, **changes):
    return dataclasses.replace(cfg, **changes)
