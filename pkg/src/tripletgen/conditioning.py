"""Text and scene conditioning.

A closed vocabulary with a learned embedding table stands in for a
pretrained text encoder, and a histogram feature extractor plus k-means
stands in for a pretrained scene classifier.  The scene token of a sample's
group is appended to its text tokens to form the condition sequence.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from tripletgen.corpus import CorpusConfig, PromptRecord, Triplet
from tripletgen.errors import ConfigError, ShapeError

PAD, NULL, SEP, COMMA = "<pad>", "<null>", ";", ","
SPECIAL_TOKENS = (PAD, NULL, SEP, COMMA)


def scene_words(desc: str) -> list[str]:
    return [w for w in re.split(r"[^a-z0-9]+", desc.lower()) if w]


@dataclass
class Vocabulary:
    tokens: list[str]
    max_len: int
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if list(self.tokens[:len(SPECIAL_TOKENS)]) != list(SPECIAL_TOKENS):
            raise ConfigError("vocabulary must start with the reserved tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("duplicate vocabulary tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def null_id(self) -> int:
        return self.index[NULL]

    @classmethod
    def from_corpus(cls, config: CorpusConfig) -> "Vocabulary":
        words = []
        for s in config.scenes:
            words += [w for w in scene_words(s.description) if w not in words]
        names = [c.name.lower() for c in sorted(config.classes, key=lambda c: c.class_id)]
        longest = max(len(scene_words(s.description)) for s in config.scenes)
        max_len = longest + 1 + max(2 * len(names) - 1, 0)
        return cls(list(SPECIAL_TOKENS) + words + [n for n in names if n not in words], max_len)

    def tokenize(self, prompt: PromptRecord | str) -> list[str]:
        if isinstance(prompt, str):
            prompt = PromptRecord.parse(prompt)
        toks = scene_words(prompt.scene_desc) + [SEP]
        for k, name in enumerate(prompt.class_names):
            if k:
                toks.append(COMMA)
            toks.append(name.lower().strip())
        if toks == [SEP]:
            raise ConfigError("cannot encode an empty prompt")
        return toks

    def token_ids(self, prompt: PromptRecord | str) -> list[int]:
        ids = []
        for tok in self.tokenize(prompt):
            if tok not in self.index:
                raise ConfigError(f"token {tok!r} is not in the vocabulary")
            ids.append(self.index[tok])
        if len(ids) > self.max_len:
            raise ConfigError(f"prompt has {len(ids)} tokens, more than max_len={self.max_len}")
        return ids + [self.pad_id] * (self.max_len - len(ids))

    def encode_batch(self, prompts) -> torch.Tensor:
        return torch.tensor([self.token_ids(p) for p in prompts], dtype=torch.long)

    def null_ids(self) -> list[int]:
        return [self.null_id] + [self.pad_id] * (self.max_len - 1)

    def to_json(self) -> dict:
        return {"tokens": self.tokens, "max_len": self.max_len}

    @classmethod
    def from_json(cls, d: dict) -> "Vocabulary":
        return cls(list(d["tokens"]), int(d["max_len"]))


class TextEncoder(nn.Module):
    """Learned embedding table over the closed vocabulary."""

    def __init__(self, vocab_size: int, dim: int):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, dim)
        nn.init.normal_(self.embed.weight, std=0.5)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.embed(ids)


class SceneTokenTable(nn.Module):
    """K learnable scene embeddings; scene ids are 1-based."""

    def __init__(self, K: int, dim: int):
        super().__init__()
        if K < 1:
            raise ConfigError("K must be at least 1")
        self.K = K
        self.embed = nn.Embedding(K, dim)
        nn.init.normal_(self.embed.weight, std=0.5)

    def forward(self, scene_ids: torch.Tensor) -> torch.Tensor:
        scene_ids = torch.as_tensor(scene_ids, dtype=torch.long)
        if scene_ids.numel() and (int(scene_ids.min()) < 1 or int(scene_ids.max()) > self.K):
            raise ConfigError(f"scene ids must lie in [1, {self.K}]")
        return self.embed(scene_ids - 1)


@dataclass
class ConditionBundle:
    token_embeddings: torch.Tensor  # (L, D)
    scene_token: torch.Tensor  # (D,)
    pad_mask: torch.Tensor  # (L + 1,) True where padded

    @property
    def combined(self) -> torch.Tensor:
        return torch.cat([self.token_embeddings, self.scene_token[None]], dim=0)


def encode_text(prompt, vocab: Vocabulary, encoder: TextEncoder) -> torch.Tensor:
    return encoder(torch.tensor(vocab.token_ids(prompt), dtype=torch.long))


def build_condition(prompt, scene_id: int, vocab: Vocabulary, encoder: TextEncoder,
                    scenes: SceneTokenTable) -> ConditionBundle:
    ids = torch.tensor(vocab.token_ids(prompt), dtype=torch.long)
    pad = torch.cat([ids == vocab.pad_id, torch.zeros(1, dtype=torch.bool)])
    return ConditionBundle(encoder(ids), scenes(torch.tensor([scene_id]))[0], pad)


def condition_batch(ids: torch.Tensor, scene_ids: torch.Tensor, vocab: Vocabulary, encoder: TextEncoder,
                    scenes: SceneTokenTable, drop: torch.Tensor | None = None):
    """Batched form of ``build_condition``: returns (tokens (B, L+1, D), pad mask (B, L+1)).

    ``drop`` marks rows replaced by the null condition (classifier-free guidance).
    """
    scene_tok = scenes(scene_ids)
    if drop is not None and bool(drop.any()):
        ids = torch.where(drop[:, None], torch.tensor(vocab.null_ids()), ids)
        scene_tok = scene_tok * (~drop)[:, None].to(scene_tok.dtype)
    tokens = torch.cat([encoder(ids), scene_tok[:, None]], dim=1)
    pad = torch.cat([ids == vocab.pad_id, torch.zeros(len(ids), 1, dtype=torch.bool)], dim=1)
    return tokens, pad


# --------------------------------------------------------------------------- scene features

HIST_BINS = 8
DOWNSAMPLE = 4


def extract_scene_features(triplet: Triplet) -> np.ndarray:
    """VIS colour histograms of a pooled image, IR histogram, and median background colour."""
    vis, ir = np.asarray(triplet.vis, dtype=float), np.asarray(triplet.ir, dtype=float)
    if vis.ndim != 3 or vis.shape[2] != 3 or ir.shape[:2] != vis.shape[:2]:
        raise ShapeError(f"unexpected triplet shapes {vis.shape}, {ir.shape}")
    H, W = vis.shape[:2]
    f = DOWNSAMPLE if H % DOWNSAMPLE == 0 and W % DOWNSAMPLE == 0 else 1
    pooled = vis.reshape(H // f, f, W // f, f, 3).mean(axis=(1, 3))
    edges = np.linspace(0.0, 1.0, HIST_BINS + 1)
    parts = [np.histogram(pooled[..., ch], bins=edges)[0] / pooled[..., ch].size for ch in range(3)]
    parts.append(np.histogram(ir[..., 0], bins=edges)[0] / ir[..., 0].size)
    parts.append(np.concatenate([np.median(vis.reshape(-1, 3), axis=0), np.median(ir.reshape(-1, 1), axis=0)]))
    return np.concatenate(parts)


@dataclass
class SceneGroups:
    K: int
    assignment: np.ndarray  # group id in [1, K] per training sample
    centroids: np.ndarray  # (K, d)
    feature_kind: str = "vis-hist8x3+ir-hist8+median-bg"

    def predict(self, features: np.ndarray) -> np.ndarray:
        d = ((np.asarray(features)[:, None, :] - self.centroids[None]) ** 2).sum(-1)
        return d.argmin(axis=1) + 1

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.K + 1)[1:]

    def to_json(self) -> dict:
        return {"K": self.K, "assignment": self.assignment.tolist(), "centroids": self.centroids.tolist(),
                "feature_kind": self.feature_kind}

    @classmethod
    def from_json(cls, d: dict) -> "SceneGroups":
        return cls(int(d["K"]), np.asarray(d["assignment"], dtype=int), np.asarray(d["centroids"], dtype=float),
                   d.get("feature_kind", ""))


def _kmeans_pp(X, K, rng):
    centers = [X[rng.integers(len(X))]]
    for _ in range(1, K):
        d = np.min(((X[:, None] - np.asarray(centers)[None]) ** 2).sum(-1), axis=1)
        total = d.sum()
        idx = rng.choice(len(X), p=d / total) if total > 0 else rng.integers(len(X))
        centers.append(X[idx])
    return np.asarray(centers, dtype=float)


def _lloyd(X, centers, max_iter=100):
    K = len(centers)
    labels = None
    for _ in range(max_iter):
        d = ((X[:, None] - centers[None]) ** 2).sum(-1)
        new = d.argmin(axis=1)
        # reseed empty clusters from the point farthest from its centroid
        for k in range(K):
            if not np.any(new == k):
                far = int(np.argmax(d[np.arange(len(X)), new]))
                centers[k] = X[far]
                new[far] = k
                d = ((X[:, None] - centers[None]) ** 2).sum(-1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for k in range(K):
            centers[k] = X[labels == k].mean(axis=0)
    inertia = ((X - centers[labels]) ** 2).sum()
    return labels, centers, inertia


def cluster_scenes(features, K: int, rng_seed: int = 0, n_init: int = 4) -> SceneGroups:
    """k-means into K non-empty groups (k-means++ seeding, best of ``n_init`` restarts)."""
    X = np.asarray(features, dtype=float)
    if K < 1:
        raise ConfigError("K must be at least 1")
    if K > len(X):
        raise ConfigError(f"K={K} exceeds the number of samples ({len(X)})")
    rng = np.random.default_rng(rng_seed)
    best = None
    for _ in range(n_init):
        labels, centers, inertia = _lloyd(X, _kmeans_pp(X, K, rng))
        if best is None or inertia < best[2] - 1e-12:
            best = (labels, centers, inertia)
    labels, centers, _ = best
    return SceneGroups(K, labels.astype(int) + 1, centers)
