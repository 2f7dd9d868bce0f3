"""Procedural VIS-IR-Label triplet corpus.

Every triplet is rendered from the same placed shapes, so the three
modalities are pixel-aligned by construction and the label map is the exact
ground truth.  Shapes are hard-rasterized (no anti-aliasing) and placed in
order: a later shape overwrites the pixels of an earlier one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from tripletgen._util import digest, write_json
from tripletgen.errors import ConfigError, CorpusIOError, DegenerateInputError

SHAPE_FAMILIES = ("ellipse", "rectangle", "thin_bar")
MIN_SIZE = 16
# a placed class must keep at least this many visible pixels after occlusion
MIN_VISIBLE_PIXELS = 4
PLACEMENT_TRIES = 50


@dataclass(frozen=True)
class SceneSpec:
    scene_type: str
    description: str
    bg_mean: tuple[float, float, float]
    bg_var: tuple[float, float, float]
    ir_base: float

    def __post_init__(self):
        if not 0.0 <= self.ir_base <= 1.0:
            raise ConfigError(f"ir_base must lie in [0, 1], got {self.ir_base}")
        if not self.description.strip():
            raise ConfigError(f"scene {self.scene_type!r} has an empty description")


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    name: str
    shape_family: str
    vis_mean: tuple[float, float, float]
    vis_var: tuple[float, float, float]
    ir_offset: float
    base_frequency: float
    scale: float = 1.0

    def __post_init__(self):
        if self.class_id < 1:
            raise ConfigError("class ids start at 1; 0 is background")
        if self.shape_family not in SHAPE_FAMILIES:
            raise ConfigError(f"unknown shape family {self.shape_family!r}")
        if not -1.0 <= self.ir_offset <= 1.0:
            raise ConfigError(f"ir_offset must lie in [-1, 1], got {self.ir_offset}")
        if not 0.0 < self.base_frequency <= 1.0:
            raise ConfigError(f"base_frequency must lie in (0, 1], got {self.base_frequency}")


@dataclass(frozen=True)
class PromptRecord:
    scene_desc: str
    class_names: tuple[str, ...]

    @property
    def rendered(self) -> str:
        return "; ".join([self.scene_desc, ", ".join(self.class_names)])

    @classmethod
    def parse(cls, text: str) -> "PromptRecord":
        scene, _, rest = text.partition("; ")
        names = tuple(n.strip() for n in rest.rstrip(" .").split(",") if n.strip())
        return cls(scene.strip(), names)


@dataclass
class Triplet:
    vis: np.ndarray  # (H, W, 3) float in [0, 1]
    ir: np.ndarray  # (H, W, 1) float in [0, 1]
    label: np.ndarray  # (H, W) uint8 class ids
    prompt: PromptRecord
    scene_id: int

    @property
    def size(self) -> tuple[int, int]:
        return self.label.shape

    def class_ids(self) -> list[int]:
        return [int(c) for c in np.unique(self.label) if c != 0]


@dataclass
class CorpusConfig:
    scenes: list[SceneSpec]
    classes: list[ClassSpec]
    scene_weights: list[float]
    size: tuple[int, int] = (64, 64)
    vis_noise: float = 0.03
    ir_noise: float = 0.03

    def __post_init__(self):
        validate_classes(self.classes)
        if len(self.scene_weights) != len(self.scenes) or min(self.scene_weights) <= 0:
            raise ConfigError("scene_weights needs one positive weight per scene")
        types = [s.scene_type for s in self.scenes]
        if len(set(types)) != len(types):
            raise ConfigError("scene types must be unique")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def class_by_id(self) -> dict[int, ClassSpec]:
        return {c.class_id: c for c in self.classes}

    def hash(self) -> str:
        return digest(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        d["scenes"] = [SceneSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in s.items()})
                       for s in d["scenes"]]
        d["classes"] = [ClassSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in c.items()})
                        for c in d["classes"]]
        d["size"] = tuple(d.get("size", (64, 64)))
        return cls(**d)


def validate_classes(classes: list[ClassSpec]) -> None:
    if not classes:
        raise ConfigError("at least one class is required")
    ids = sorted(c.class_id for c in classes)
    if ids != list(range(1, len(classes) + 1)):
        raise ConfigError(f"class ids must be contiguous from 1, got {ids}")
    offsets = [c.ir_offset for c in classes]
    if len(set(offsets)) != len(offsets):
        raise ConfigError("ir_offset values must be pairwise distinct")
    if min(c.base_frequency for c in classes) > 0.1:
        raise ConfigError("at least one class needs base_frequency <= 0.1 (long tail)")


def default_corpus_config(size=(64, 64)) -> CorpusConfig:
    """Four scene types with an imbalanced mix and five classes with a long tail."""
    scenes = [
        SceneSpec("night_lot", "Nighttime parking area adjacent to a dense forest background",
                  (0.08, 0.12, 0.10), (0.0004, 0.0004, 0.0004), 0.30),
        SceneSpec("road", "Daytime urban road between tall buildings",
                  (0.55, 0.55, 0.58), (0.0004, 0.0004, 0.0004), 0.45),
        SceneSpec("field", "Open grass field under a clear sky",
                  (0.25, 0.60, 0.22), (0.0004, 0.0004, 0.0004), 0.40),
        SceneSpec("tunnel", "Dim tunnel interior lit by ceiling lamps",
                  (0.45, 0.32, 0.12), (0.0004, 0.0004, 0.0004), 0.35),
    ]
    classes = [
        ClassSpec(1, "car", "rectangle", (0.80, 0.15, 0.15), (0.002, 0.002, 0.002), 0.25, 0.55, 1.2),
        ClassSpec(2, "traffic light", "rectangle", (0.95, 0.85, 0.10), (0.001, 0.001, 0.001), 0.12, 0.10, 0.6),
        ClassSpec(3, "pole", "thin_bar", (0.70, 0.70, 0.75), (0.001, 0.001, 0.001), -0.15, 0.35),
        ClassSpec(4, "curve", "thin_bar", (0.15, 0.20, 0.85), (0.001, 0.001, 0.001), -0.25, 0.30),
        ClassSpec(5, "person", "ellipse", (0.95, 0.55, 0.75), (0.002, 0.002, 0.002), 0.45, 0.05),
    ]
    return CorpusConfig(scenes, classes, scene_weights=[0.45, 0.30, 0.17, 0.08], size=tuple(size))


def _shape_mask(spec: ClassSpec, rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W]
    s = min(H, W)
    if spec.shape_family == "ellipse":
        ry = rng.uniform(s / 10, s / 6) * spec.scale
        rx = ry * rng.uniform(0.5, 0.8)
        cy, cx = rng.uniform(ry, H - ry), rng.uniform(rx, W - rx)
        return ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0
    if spec.shape_family == "rectangle":
        h = max(2, int(round(rng.uniform(s / 6, s / 3) * spec.scale)))
        w = max(2, int(round(rng.uniform(s / 6, s / 3) * spec.scale)))
        h, w = min(h, H - 1), min(w, W - 1)
    else:
        length = int(round(rng.uniform(s / 3, s / 1.6) * spec.scale))
        thick = max(2, s // 16)
        if rng.random() < 0.5:
            h, w = min(length, H - 1), thick
        else:
            h, w = thick, min(length, W - 1)
    y0 = int(rng.integers(0, H - h + 1))
    x0 = int(rng.integers(0, W - w + 1))
    mask = np.zeros((H, W), dtype=bool)
    mask[y0:y0 + h, x0:x0 + w] = True
    return mask


def _draw_color(mean, var, rng) -> np.ndarray:
    return np.clip(np.asarray(mean) + np.sqrt(np.asarray(var)) * rng.standard_normal(len(mean)), 0.0, 1.0)


def generate_triplet(scene: SceneSpec, classes: list[ClassSpec], rng_seed, size=(64, 64),
                     placement: list[int] | None = None, vis_noise=0.03, ir_noise=0.03,
                     scene_id: int = 1) -> Triplet:
    """Render one aligned triplet.

    ``placement`` is the ordered list of class ids to draw; when omitted each
    class is included independently with its ``base_frequency``.  An empty
    placement yields a pure-background triplet.
    """
    H, W = size
    if H < MIN_SIZE or W < MIN_SIZE:
        raise DegenerateInputError(f"image size {size} is below the {MIN_SIZE}x{MIN_SIZE} minimum")
    if not classes:
        raise ConfigError("classes must be non-empty")
    by_id = {c.class_id: c for c in classes}
    rng = np.random.default_rng(rng_seed)
    if placement is None:
        placement = [c.class_id for c in sorted(classes, key=lambda c: c.class_id)
                     if rng.random() < c.base_frequency]
        rng.shuffle(placement)
    for cid in placement:
        if cid not in by_id:
            raise ConfigError(f"class id {cid} in placement is not configured")

    label = np.zeros((H, W), dtype=np.uint8)
    for cid in placement:
        for _ in range(PLACEMENT_TRIES):
            mask = _shape_mask(by_id[cid], rng, H, W)
            trial = label.copy()
            trial[mask] = cid
            counts = np.bincount(trial.ravel(), minlength=len(by_id) + 1)
            if all(counts[c] >= MIN_VISIBLE_PIXELS for c in set(placement[:placement.index(cid) + 1])):
                break
        label = trial

    vis = np.empty((H, W, 3))
    vis[:] = _draw_color(scene.bg_mean, scene.bg_var, rng)
    ir = np.full((H, W), scene.ir_base, dtype=float)
    present = [c for c in placement if np.any(label == c)]
    for cid in present:
        region = label == cid
        vis[region] = _draw_color(by_id[cid].vis_mean, by_id[cid].vis_var, rng)
        ir[region] = scene.ir_base + by_id[cid].ir_offset
    vis = np.clip(vis + vis_noise * rng.standard_normal(vis.shape), 0.0, 1.0)
    ir = np.clip(ir + ir_noise * rng.standard_normal(ir.shape), 0.0, 1.0)[..., None]

    names = tuple(by_id[c].name for c in sorted(set(present)))
    return Triplet(vis, ir, label, PromptRecord(scene.description, names), scene_id)


def sample_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


# --------------------------------------------------------------------------- disk

@dataclass
class ManifestEntry:
    id: str
    scene_id: int
    classes: list[int]
    prompt: str
    scene_type: str | None = None
    root: Path | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        d = {"id": self.id, "scene_id": self.scene_id, "classes": list(self.classes), "prompt": self.prompt}
        if self.scene_type is not None:
            d["scene_type"] = self.scene_type
        return d


@dataclass
class DatasetManifest:
    root_path: Path
    entries: list[ManifestEntry]
    seed: int
    config_hash: str
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest(self.root_path, [self.entries[i] for i in indices], self.seed,
                               self.config_hash, dict(self.extra))

    def class_lists(self) -> list[list[int]]:
        return [list(e.classes) for e in self.entries]

    def load_all(self) -> list[Triplet]:
        return [load_triplet(e) for e in self.entries]

    def save(self) -> Path:
        path = Path(self.root_path) / "manifest.json"
        write_json(path, {"seed": self.seed, "config_hash": self.config_hash,
                          "entries": [e.to_json() for e in self.entries], **self.extra})
        return path

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.json"
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise CorpusIOError("manifest not found", path) from exc
        except json.JSONDecodeError as exc:
            raise CorpusIOError("corrupt manifest", path) from exc
        entries = [ManifestEntry(e["id"], int(e["scene_id"]), [int(c) for c in e["classes"]], e["prompt"],
                                 e.get("scene_type"), root) for e in doc["entries"]]
        extra = {k: v for k, v in doc.items() if k not in ("seed", "config_hash", "entries")}
        return cls(root, entries, doc["seed"], doc["config_hash"], extra)


def _label_palette() -> list[int]:
    rng = np.random.default_rng(7)
    pal = [0, 0, 0] + list(rng.integers(40, 256, size=255 * 3))
    return [int(v) for v in pal]


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_triplet(triplet: Triplet, root, sample_id: str, scene_type: str | None = None) -> ManifestEntry:
    root = Path(root)
    try:
        for sub in ("vis", "ir", "label"):
            (root / sub).mkdir(parents=True, exist_ok=True)
        Image.fromarray(_to_u8(triplet.vis), mode="RGB").save(root / "vis" / f"{sample_id}.png")
        Image.fromarray(_to_u8(triplet.ir[..., 0]), mode="L").save(root / "ir" / f"{sample_id}.png")
        lab = Image.fromarray(triplet.label.astype(np.uint8), mode="P")
        lab.putpalette(_label_palette())
        lab.save(root / "label" / f"{sample_id}.png")
    except OSError as exc:
        raise CorpusIOError(f"cannot write triplet ({exc.strerror or exc})", root) from exc
    return ManifestEntry(sample_id, triplet.scene_id, triplet.class_ids(), triplet.prompt.rendered,
                         scene_type, root)


def load_triplet(entry: ManifestEntry, root=None) -> Triplet:
    root = Path(root if root is not None else entry.root)
    arrays = {}
    for sub in ("vis", "ir", "label"):
        path = root / sub / f"{entry.id}.png"
        try:
            with Image.open(path) as im:
                arrays[sub] = np.asarray(im)
        except (OSError, ValueError) as exc:
            raise CorpusIOError("missing or corrupt triplet file", path) from exc
    vis = arrays["vis"].astype(np.float64) / 255.0
    ir = arrays["ir"].astype(np.float64)[..., None] / 255.0
    label = arrays["label"].astype(np.uint8)
    if vis.shape[:2] != label.shape or ir.shape[:2] != label.shape:
        raise CorpusIOError("modalities disagree in size", root / "label" / f"{entry.id}.png")
    return Triplet(vis, ir, label, PromptRecord.parse(entry.prompt), entry.scene_id)


def generate_corpus(config: CorpusConfig, n_samples: int, rng_seed: int, root) -> DatasetManifest:
    """Write ``n_samples`` triplets plus ``manifest.json`` under ``root``."""
    if n_samples < 1:
        raise DegenerateInputError("n_samples must be at least 1")
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CorpusIOError("cannot create corpus directory", root) from exc
    weights = np.asarray(config.scene_weights, dtype=float)
    weights = weights / weights.sum()
    entries = []
    for i in range(n_samples):
        ss = sample_seed(rng_seed, i)
        scene_idx = int(np.random.default_rng(ss.spawn(1)[0]).choice(len(config.scenes), p=weights))
        scene = config.scenes[scene_idx]
        trip = generate_triplet(scene, config.classes, ss, config.size, vis_noise=config.vis_noise,
                                ir_noise=config.ir_noise, scene_id=scene_idx + 1)
        entries.append(save_triplet(trip, root, f"{i:05d}", scene.scene_type))
    manifest = DatasetManifest(root, entries, rng_seed, config.hash())
    manifest.save()
    return manifest
