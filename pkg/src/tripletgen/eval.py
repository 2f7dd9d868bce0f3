"""Evaluation: segmentation utility (mIoU under real / syn / real+syn
training), cross-modal consistency of triplets, and diversity of a
generated set."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage, stats

from tripletgen.codecs import triplet_tensors
from tripletgen.conditioning import SceneGroups, extract_scene_features
from tripletgen.corpus import CorpusConfig, Triplet, _label_palette
from tripletgen.errors import DataError

log = logging.getLogger(__name__)

# a class counts as present in a label map only with at least this many pixels
PRESENCE_MIN_PIXELS = 4
EDGE_THRESHOLD = 0.1


def present_classes(label: np.ndarray, min_pixels: int = PRESENCE_MIN_PIXELS) -> list[int]:
    counts = np.bincount(np.asarray(label).ravel())
    return [c for c in range(1, len(counts)) if counts[c] >= min_pixels]


# --------------------------------------------------------------------------- segmenter

@dataclass
class SegConfig:
    steps: int = 800
    batch_size: int = 32
    lr: float = 2e-3
    width: int = 16


def _conv(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class SegModel(nn.Module):
    """Two-level encoder-decoder over VIS (3) + IR (1) channels."""

    def __init__(self, n_classes: int, width: int = 16):
        super().__init__()
        self.n_classes = n_classes
        self.enc1 = nn.Sequential(_conv(4, width), _conv(width, width))
        self.enc2 = nn.Sequential(_conv(width, 2 * width), _conv(2 * width, 2 * width))
        self.mid = nn.Sequential(_conv(2 * width, 4 * width), _conv(4 * width, 2 * width))
        self.dec2 = _conv(4 * width, width)
        self.dec1 = _conv(2 * width, width)
        self.head = nn.Conv2d(width, n_classes + 1, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        m = self.mid(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([F.interpolate(m, scale_factor=2), e2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, scale_factor=2), e1], 1))
        return self.head(d1)

    @torch.no_grad()
    def predict(self, triplets, batch=256) -> np.ndarray:
        self.eval()
        x = _seg_inputs(triplets)
        return torch.cat([self(x[i:i + batch]).argmax(1) for i in range(0, len(x), batch)]).numpy()


def _seg_inputs(triplets) -> torch.Tensor:
    d = triplet_tensors(triplets)
    return torch.cat([d["V"], d["I"]], dim=1)


def train_segmenter(train_sets, n_classes: int, seed: int, cfg: SegConfig = SegConfig()) -> SegModel:
    """Fixed-budget training on the union of ``train_sets`` (lists of triplets)."""
    triplets = [t for s in train_sets for t in s]
    if not triplets:
        raise DataError("segmenter needs a non-empty training set")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    x = _seg_inputs(triplets)
    y = torch.from_numpy(np.stack([t.label for t in triplets]).astype(np.int64))
    model = SegModel(n_classes, cfg.width)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps)
    model.train()
    for _ in range(cfg.steps):
        idx = torch.randint(0, len(x), (min(cfg.batch_size, len(x)),), generator=gen)
        xb, yb = x[idx], y[idx]
        flip = torch.rand(len(idx), generator=gen) < 0.5
        xb = torch.where(flip[:, None, None, None], xb.flip(-1), xb)
        yb = torch.where(flip[:, None, None], yb.flip(-1), yb)
        loss = F.cross_entropy(model(xb), yb)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
    return model.eval()


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, n_labels: int) -> np.ndarray:
    gt, pred = np.asarray(gt).ravel().astype(np.int64), np.asarray(pred).ravel().astype(np.int64)
    return np.bincount(gt * n_labels + pred, minlength=n_labels * n_labels).reshape(n_labels, n_labels)


def iou_from_confusion(cm: np.ndarray) -> tuple[float, dict[int, float]]:
    """Per-class IoU = TP / (TP + FP + FN); classes with an empty union are left out of the mean."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - tp
    per = {c: float(tp[c] / union[c]) for c in range(len(cm)) if union[c] > 0}
    return (float(np.mean(list(per.values()))) if per else float("nan")), per


def miou(model, test_triplets, n_classes: int | None = None) -> tuple[float, dict[int, float]]:
    """``model`` is a SegModel or any callable mapping a triplet list to (N, H, W) predictions."""
    n_classes = model.n_classes if n_classes is None else n_classes
    pred = model.predict(test_triplets) if hasattr(model, "predict") else model(test_triplets)
    gt = np.stack([t.label for t in test_triplets])
    return iou_from_confusion(confusion_matrix(gt, pred, n_classes + 1))


# --------------------------------------------------------------------------- consistency

def _sobel_mag(img: np.ndarray) -> np.ndarray:
    gx = ndimage.sobel(img, axis=1, mode="nearest") / 4.0
    gy = ndimage.sobel(img, axis=0, mode="nearest") / 4.0
    return np.hypot(gx, gy)


def label_edges(label: np.ndarray) -> np.ndarray:
    e = np.zeros(label.shape, dtype=bool)
    dy = label[1:] != label[:-1]
    dx = label[:, 1:] != label[:, :-1]
    e[1:] |= dy
    e[:-1] |= dy
    e[:, 1:] |= dx
    e[:, :-1] |= dx
    return e


def image_edges(t: Triplet, threshold=EDGE_THRESHOLD) -> np.ndarray:
    vis_mag = np.max([_sobel_mag(t.vis[..., c]) for c in range(3)], axis=0)
    return (vis_mag > threshold) | (_sobel_mag(t.ir[..., 0]) > threshold)


def boundary_counts(t: Triplet) -> tuple[int, int, int, int]:
    le, ie = label_edges(t.label), image_edges(t)
    band = np.ones((3, 3), dtype=bool)
    le_d, ie_d = ndimage.binary_dilation(le, band), ndimage.binary_dilation(ie, band)
    return int((ie & le_d).sum()), int(ie.sum()), int((le & ie_d).sum()), int(le.sum())


def class_ir_means(triplets) -> dict[int, float]:
    sums, counts = {}, {}
    for t in triplets:
        ir = t.ir[..., 0]
        for c in present_classes(t.label):
            m = t.label == c
            sums[c] = sums.get(c, 0.0) + float(ir[m].sum())
            counts[c] = counts.get(c, 0) + int(m.sum())
    return {c: sums[c] / counts[c] for c in sorted(sums)}


def consistency_metrics(triplets, corpus_cfg: CorpusConfig) -> dict[str, float]:
    """class_ir_ordering_corr, boundary_f1 and prompt_recall of a triplet set."""
    if not triplets:
        raise DataError("consistency metrics need at least one triplet")
    offsets = {c.class_id: c.ir_offset for c in corpus_cfg.classes}
    by_name = {c.name.lower(): c.class_id for c in corpus_cfg.classes}
    means = class_ir_means(triplets)
    if len(means) >= 2:
        corr = float(stats.spearmanr(list(means.values()), [offsets[c] for c in means]).statistic)
    else:
        corr = float("nan")
    hit_p = tot_p = hit_r = tot_r = 0
    wanted = found = 0
    for t in triplets:
        a, b, c, d = boundary_counts(t)
        hit_p, tot_p, hit_r, tot_r = hit_p + a, tot_p + b, hit_r + c, tot_r + d
        want = {by_name[n.lower()] for n in t.prompt.class_names}
        wanted += len(want)
        found += len(want & set(present_classes(t.label)))
    precision = hit_p / tot_p if tot_p else 0.0
    recall = hit_r / tot_r if tot_r else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return {"class_ir_ordering_corr": corr, "boundary_f1": f1,
            "prompt_recall": found / wanted if wanted else float("nan")}


def shuffle_labels(triplets, rng: np.random.Generator) -> list[Triplet]:
    """Pair every image with another triplet's label map (the permutation null)."""
    perm = rng.permutation(len(triplets))
    return [Triplet(t.vis, t.ir, triplets[j].label, t.prompt, t.scene_id) for t, j in zip(triplets, perm)]


def permutation_test(triplets, corpus_cfg, n_shuffles=200, seed=0) -> dict[str, dict]:
    """Observed consistency metrics vs. the label-shuffle null; one-sided p-values."""
    obs = consistency_metrics(triplets, corpus_cfg)
    rng = np.random.default_rng(seed)
    null = {k: [] for k in obs}
    for _ in range(n_shuffles):
        m = consistency_metrics(shuffle_labels(triplets, rng), corpus_cfg)
        for k, v in m.items():
            null[k].append(v)
    out = {}
    for k, v in obs.items():
        arr = np.asarray(null[k], dtype=float)
        arr = np.where(np.isnan(arr), -np.inf, arr)
        p = (1 + int(np.sum(arr >= v))) / (1 + n_shuffles)
        finite = arr[np.isfinite(arr)]
        out[k] = {"observed": v, "null_mean": float(finite.mean()) if finite.size else float("nan"),
                  "null_std": float(finite.std()) if finite.size else float("nan"), "p_value": p}
    return out


# --------------------------------------------------------------------------- diversity

def diversity_metrics(triplets, groups: SceneGroups, corpus_cfg: CorpusConfig) -> dict[str, float]:
    """scene_entropy (bits) of nearest-centroid scene groups, class_coverage,
    and rare_class_rate = rare-class occurrences per triplet (rare: base_frequency <= 0.1)."""
    if not triplets:
        raise DataError("diversity metrics need at least one triplet")
    pred = groups.predict(np.stack([extract_scene_features(t) for t in triplets]))
    p = np.bincount(pred, minlength=groups.K + 1)[1:] / len(pred)
    entropy = float(-np.sum(p[p > 0] * np.log2(p[p > 0])))
    rare = {c.class_id for c in corpus_cfg.classes if c.base_frequency <= 0.1}
    seen, rare_hits = set(), 0
    for t in triplets:
        present = set(present_classes(t.label))
        seen |= present
        rare_hits += len(present & rare)
    return {"scene_entropy": entropy, "class_coverage": len(seen) / corpus_cfg.n_classes,
            "rare_class_rate": rare_hits / len(triplets)}


# --------------------------------------------------------------------------- protocol

@dataclass
class MetricsReport:
    regime: str
    seed: int
    miou: float
    per_class_iou: dict[int, float]
    consistency: dict = field(default_factory=dict)
    diversity: dict = field(default_factory=dict)
    config_hash: str = ""


def _pick(sets, seed):
    if sets is None:
        return []
    if isinstance(sets, dict):
        return sets[seed]
    if callable(sets):
        return sets(seed)
    return sets


def run_protocol(real, syn, test, n_classes: int, regimes=("real", "syn", "real+syn"), seeds=(0, 1, 2),
                 seg_cfg: SegConfig = SegConfig(), config_hash: str = "") -> dict:
    """Train one segmenter per (regime, seed); report mean/std mIoU per regime.

    ``syn`` is a triplet list, a {seed: list} dict or a callable seed -> list.
    """
    rows = []
    for regime in regimes:
        for seed in seeds:
            parts = {"real": [real], "syn": [_pick(syn, seed)], "real+syn": [real, _pick(syn, seed)]}[regime]
            model = train_segmenter(parts, n_classes, seed, seg_cfg)
            m, per = miou(model, test)
            log.info("protocol %s seed %d mIoU %.4f", regime, seed, m)
            rows.append(MetricsReport(regime, seed, m, per, config_hash=config_hash))
    return {"rows": rows, "summary": summarize(rows)}


def summarize(rows) -> dict[str, dict]:
    out = {}
    for r in rows:
        out.setdefault(r.regime, []).append(r.miou)
    return {k: {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v), "values": v} for k, v in out.items()}


def ratio_sweep(real, test, n_classes, ratios, make_syn, seeds=(0, 1, 2), seg_cfg=SegConfig()) -> dict:
    """For each ratio, subsample ``real``; ``make_syn(real_subset, ratio, seed)`` returns the
    synthetic set (retrained or reused).  Reports real vs real+syn mIoU per ratio."""
    table = {}
    for ratio in ratios:
        rows = []
        for seed in seeds:
            rng = np.random.default_rng([seed, int(round(ratio * 1e6))])
            k = max(1, int(round(ratio * len(real))))
            subset = [real[i] for i in sorted(rng.choice(len(real), size=k, replace=False))]
            syn = make_syn(subset, ratio, seed)
            for regime, parts in (("real", [subset]), ("real+syn", [subset, syn])):
                m, per = miou(train_segmenter(parts, n_classes, seed, seg_cfg), test)
                rows.append(MetricsReport(regime, seed, m, per))
        table[ratio] = summarize(rows)
    return table


def scaling_sweep(real, test, n_classes, syn_by_multiple, seeds=(0, 1, 2), seg_cfg=SegConfig()) -> dict:
    """``syn_by_multiple`` maps k -> (seed -> synthetic list of size k * len(real))."""
    table = {}
    for k, syn in syn_by_multiple.items():
        rows = []
        for seed in seeds:
            m, per = miou(train_segmenter([real, _pick(syn, seed)], n_classes, seed, seg_cfg), test)
            rows.append(MetricsReport(f"1:{k}", seed, m, per))
        table[k] = summarize(rows)[f"1:{k}"]
    return table


def render_table(summary: dict) -> str:
    lines = [f"{'regime':<12} {'mIoU mean':>10} {'std':>8} {'n':>3}"]
    for k, v in summary.items():
        lines.append(f"{str(k):<12} {v['mean']:>10.4f} {v['std']:>8.4f} {v['n']:>3}")
    return "\n".join(lines)


def save_grid(triplets, path, max_rows=8) -> None:
    """VIS | IR | Label side by side, one triplet per row."""
    rows = []
    pal = np.asarray(_label_palette(), dtype=np.uint8).reshape(-1, 3)
    for t in triplets[:max_rows]:
        vis = np.round(np.clip(t.vis, 0, 1) * 255).astype(np.uint8)
        ir = np.repeat(np.round(np.clip(t.ir, 0, 1) * 255).astype(np.uint8), 3, axis=2)
        rows.append(np.concatenate([vis, ir, pal[t.label]], axis=1))
    Image.fromarray(np.concatenate(rows, axis=0)).save(path)
