"""Scene-balanced, class-aware sampling weights.

Each of the K scene groups receives the same total probability 1/K.  Inside
a group, sample i is weighted by r_i = eps + max_{c in C_i} N_c^-alpha, where
N_c counts training samples (not pixels) that contain class c.  Samples
without any object class get r_i = eps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tripletgen.errors import ConfigError, DataError


@dataclass
class ClassStats:
    counts: dict[int, int]
    alpha: float = 0.5
    epsilon_floor: float = 0.05

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and np.isfinite(self.epsilon_floor)):
            raise ConfigError("alpha and epsilon_floor must be finite")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.epsilon_floor < 0:
            raise ConfigError("epsilon_floor must be non-negative")

    def rarity(self) -> dict[int, float]:
        return {c: float(n) ** -self.alpha for c, n in self.counts.items()}


@dataclass
class SamplingWeightTable:
    sample_ids: list
    group_ids: np.ndarray
    r: np.ndarray
    W: np.ndarray
    K: int

    def __len__(self):
        return len(self.W)

    def group_sums(self) -> np.ndarray:
        return np.bincount(self.group_ids - 1, weights=self.W, minlength=self.K)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "group_id", "r", "W"])
            for sid, g, r, W in zip(self.sample_ids, self.group_ids, self.r, self.W):
                w.writerow([sid, int(g), repr(float(r)), repr(float(W))])
        return path


def compute_class_stats(class_lists, alpha=0.5, epsilon_floor=0.05) -> ClassStats:
    """Count, for each class, the samples whose class list contains it.

    ``class_lists`` may also be a DatasetManifest.
    """
    if hasattr(class_lists, "class_lists"):
        class_lists = class_lists.class_lists()
    class_lists = list(class_lists)
    if not class_lists:
        raise DataError("cannot compute class statistics of an empty manifest")
    counts: dict[int, int] = {}
    for classes in class_lists:
        for c in set(classes):
            counts[int(c)] = counts.get(int(c), 0) + 1
    return ClassStats(dict(sorted(counts.items())), alpha, epsilon_floor)


def compute_weights(stats: ClassStats, group_ids, class_lists, K: int | None = None,
                    sample_ids=None) -> SamplingWeightTable:
    groups = np.asarray(group_ids, dtype=int)
    n = len(groups)
    if len(class_lists) != n:
        raise ConfigError("need one class list per sample")
    K = int(groups.max()) if K is None else int(K)
    if n == 0 or groups.min() < 1 or groups.max() > K:
        raise ConfigError(f"group ids must lie in [1, {K}]")
    w = stats.rarity()
    r = np.empty(n)
    for i, classes in enumerate(class_lists):
        try:
            rare = max((w[int(c)] for c in classes), default=0.0)
        except KeyError as exc:
            raise ConfigError(f"class {exc.args[0]} of sample {i} has no count") from exc
        r[i] = stats.epsilon_floor + rare
    totals = np.bincount(groups - 1, weights=r, minlength=K)
    if np.any(totals[np.unique(groups) - 1] <= 0):
        raise ConfigError("a scene group has zero total rarity; use epsilon_floor > 0")
    W = r / (K * totals[groups - 1])
    ids = list(range(n)) if sample_ids is None else list(sample_ids)
    return SamplingWeightTable(ids, groups, r, W, K)


def uniform_table(n: int, sample_ids=None) -> SamplingWeightTable:
    ids = list(range(n)) if sample_ids is None else list(sample_ids)
    return SamplingWeightTable(ids, np.ones(n, dtype=int), np.ones(n), np.full(n, 1.0 / n), 1)


def weighted_sample(table: SamplingWeightTable, batch_size: int, rng: np.random.Generator) -> list:
    """Draw ``batch_size`` sample ids i.i.d. with replacement, P(i) = W_i."""
    if batch_size < 1:
        raise ConfigError("batch_size must be at least 1")
    p = table.W / table.W.sum()
    idx = rng.choice(len(p), size=batch_size, replace=True, p=p)
    return [table.sample_ids[i] for i in idx]


class WeightedSampler:
    """Infinite batch iterator over a weight table; one instance per training loop."""

    def __init__(self, table: SamplingWeightTable, batch_size: int, seed: int):
        self.table = table
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)

    def __iter__(self):
        return self

    def __next__(self) -> list:
        return weighted_sample(self.table, self.batch_size, self.rng)


def brute_force_weights_oracle(stats: ClassStats, group_ids, class_lists, K: int | None = None):
    """Literal evaluation of the weight formula, one sample at a time (test oracle)."""
    group_ids = [int(g) for g in group_ids]
    K = max(group_ids) if K is None else K
    rarity = {}
    for c, n in stats.counts.items():
        rarity[c] = 1.0 / (n ** stats.alpha)
    r = []
    for classes in class_lists:
        best = None
        for c in classes:
            if best is None or rarity[c] > best:
                best = rarity[c]
        r.append(stats.epsilon_floor + (best if best is not None else 0.0))
    W = []
    for i, g in enumerate(group_ids):
        total = 0.0
        for j, h in enumerate(group_ids):
            if h == g:
                total += r[j]
        W.append((1.0 / K) * (r[i] / total))
    return SamplingWeightTable(list(range(len(W))), np.asarray(group_ids), np.asarray(r), np.asarray(W), K)
