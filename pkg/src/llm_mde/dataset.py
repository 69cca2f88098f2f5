"""Scene data: NYU-format directory ingestion, procedural scenes, splits and patching."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import IngestError, RangeError, ShapeError, SplitError

INDEX_FILE = "index.txt"

# scene groups in the order the k-shot protocol adds them
FEW_SHOT_CLASSES = ("bedroom", "bathroom", "diningroom", "kitchen")
ZERO_SHOT_TEST_SCENES = ("bathroom", "diningroom", "kitchen", "livingroom")
DEFAULT_ZERO_SHOT_TRAIN = "bedroom"

# 28 indoor scene types of the NYU raw collection.
SCENE_TYPES = (
    "bedroom", "bathroom", "diningroom", "kitchen", "livingroom",
    "basement", "bookstore", "cafe", "classroom", "computerlab",
    "conferenceroom", "dinette", "exerciseroom", "foyer", "furniturestore",
    "homeoffice", "homestorage", "indoorbalcony", "laundryroom", "office",
    "officekitchen", "playroom", "printerroom", "receptionroom", "studentlounge",
    "study", "studyroom", "garage",
)

SYNTHETIC_DEPTH_RANGE = (0.5, 10.0)


@dataclass
class DepthMap:
    depth: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        if self.depth.shape != self.valid_mask.shape:
            raise ShapeError(f"depth {self.depth.shape} vs mask {self.valid_mask.shape}")

    @property
    def shape(self):
        return self.depth.shape


@dataclass
class SceneSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: DepthMap
    scene_label: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ShapeError(f"expected (H, W, 3) image, got {self.image.shape}")
        if self.image.shape[:2] != self.depth.shape:
            raise ShapeError(f"image {self.image.shape[:2]} vs depth {self.depth.shape}")


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    entries: tuple[tuple[str, str, str], ...]
    depth_scale: float = 0.001

    def __len__(self):
        return len(self.entries)


def load_manifest(path, depth_scale: float = 0.001) -> DatasetManifest:
    """Read ``index.txt`` (tab separated: rgb path, depth path, scene label)."""
    root = Path(path)
    index = root / INDEX_FILE
    if not index.is_file():
        raise IngestError(f"missing {index}")
    entries = []
    with open(index, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise IngestError(f"expected 3 tab-separated fields, got {len(parts)}", line=lineno)
            rgb, depth, label = (p.strip() for p in parts)
            if not label:
                raise IngestError("empty scene label", line=lineno)
            for rel in (rgb, depth):
                if not (root / rel).is_file():
                    raise IngestError(f"file not found: {rel}", line=lineno)
            entries.append((rgb, depth, label))
    return DatasetManifest(root=root, entries=tuple(entries), depth_scale=depth_scale)


def _nearest_resize(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape[:2]
    rows = np.minimum(((np.arange(size) + 0.5) * h / size).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * w / size).astype(np.int64), w - 1)
    return arr[rows[:, None], cols[None, :]]


def load_sample(manifest: DatasetManifest, index: int, resolution: int,
                patch_size: int = 16) -> SceneSample:
    if not 0 <= index < len(manifest.entries):
        raise RangeError(f"index {index} outside [0, {len(manifest.entries)})")
    if resolution % patch_size:
        raise ShapeError(f"resolution {resolution} not divisible by patch size {patch_size}")
    rgb_rel, depth_rel, label = manifest.entries[index]
    try:
        with Image.open(manifest.root / rgb_rel) as im:
            rgb = im.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
            image = np.asarray(rgb, dtype=np.float32) / 255.0
        with Image.open(manifest.root / depth_rel) as im:
            raw = np.array(im)
    except (OSError, ValueError) as exc:
        raise IngestError(f"cannot read sample {index}: {exc}") from exc
    if raw.ndim != 2:
        raise IngestError(f"depth image {depth_rel} is not single-channel")
    raw = _nearest_resize(raw, resolution)
    valid = raw > 0
    depth = (raw.astype(np.float64) * manifest.depth_scale).astype(np.float32)
    return SceneSample(image=image, depth=DepthMap(depth, valid), scene_label=label)


def write_sample(root, stem: str, sample: SceneSample, depth_scale: float = 0.001) -> tuple[str, str]:
    """Write a sample as an 8-bit RGB PNG plus a 16-bit raw-unit depth PNG."""
    root = Path(root)
    rgb_rel, depth_rel = f"rgb/{stem}.png", f"depth/{stem}.png"
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    rgb8 = np.clip(np.rint(sample.image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb8, mode="RGB").save(root / rgb_rel)
    raw = np.where(sample.depth.valid_mask, np.rint(sample.depth.depth / depth_scale), 0)
    Image.fromarray(np.clip(raw, 0, 65535).astype(np.uint16)).save(root / depth_rel)
    return rgb_rel, depth_rel


def write_index(root, entries: Sequence[tuple[str, str, str]]) -> None:
    with open(Path(root) / INDEX_FILE, "w", encoding="utf-8") as fh:
        for rgb, depth, label in entries:
            fh.write(f"{rgb}\t{depth}\t{label}\n")


# ---------------------------------------------------------------------------
# procedural scenes


@dataclass(frozen=True)
class Box:
    """Fronto-parallel rectangle occupying rows [top, bottom) and cols [left, right)."""

    top: int
    left: int
    bottom: int
    right: int
    depth: float
    albedo: tuple[float, float, float]


@dataclass(frozen=True)
class SceneLayout:
    resolution: int
    background_depth: float
    background_albedo: tuple[float, float, float]
    boxes: tuple[Box, ...] = field(default_factory=tuple)


def _scene_rng(seed: int, scene_label: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(scene_label.encode("utf-8"))])


def synthetic_layout(seed: int, resolution: int, scene_label: str) -> SceneLayout:
    rng = _scene_rng(seed, scene_label)
    lo, hi = SYNTHETIC_DEPTH_RANGE
    # per-scene tint so scene types are distinguishable
    tint = 0.6 + 0.4 * _scene_rng(0, scene_label).random(3)
    background_depth = float(rng.uniform(0.6 * hi, hi))
    background_albedo = tuple(float(c) for c in tint * rng.uniform(0.7, 1.0, 3))
    boxes = []
    for _ in range(int(rng.integers(1, 4))):
        h, w = rng.integers(resolution // 6, resolution // 2 + 1, size=2)
        top = int(rng.integers(0, resolution - h + 1))
        left = int(rng.integers(0, resolution - w + 1))
        depth = float(rng.uniform(lo, background_depth))
        albedo = tuple(float(c) for c in tint * rng.uniform(0.4, 1.0, 3))
        boxes.append(Box(top, left, top + int(h), left + int(w), depth, albedo))
    return SceneLayout(resolution, background_depth, background_albedo, tuple(boxes))


def _shade(depth: np.ndarray) -> np.ndarray:
    lo, hi = SYNTHETIC_DEPTH_RANGE
    inv = (1.0 / depth - 1.0 / hi) / (1.0 / lo - 1.0 / hi)
    return 0.15 + 0.85 * inv


def render_layout(layout: SceneLayout) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize a layout to (image, depth); nearer boxes occlude farther ones."""
    res = layout.resolution
    depth = np.full((res, res), layout.background_depth, dtype=np.float64)
    albedo = np.empty((res, res, 3), dtype=np.float64)
    albedo[:] = layout.background_albedo
    for box in sorted(layout.boxes, key=lambda b: -b.depth):
        region = (slice(box.top, box.bottom), slice(box.left, box.right))
        closer = box.depth < depth[region]
        depth[region] = np.where(closer, box.depth, depth[region])
        albedo[region] = np.where(closer[..., None], box.albedo, albedo[region])
    image = np.clip(albedo * _shade(depth)[..., None], 0.0, 1.0)
    return image.astype(np.float32), depth.astype(np.float32)


def generate_synthetic_scene(seed: int, resolution: int, scene_label: str = "bedroom",
                             patch_size: int = 16) -> SceneSample:
    if resolution < 2 * patch_size:
        raise ShapeError(f"resolution {resolution} < 2 * patch size {patch_size}")
    image, depth = render_layout(synthetic_layout(seed, resolution, scene_label))
    return SceneSample(image=image, depth=DepthMap(depth, np.ones(depth.shape, dtype=bool)),
                       scene_label=scene_label)


def synthetic_pool(count_per_scene: int, seed: int, resolution: int,
                   scene_types: Sequence[str] = SCENE_TYPES, patch_size: int = 16) -> list[SceneSample]:
    pool = []
    for label in scene_types:
        for i in range(count_per_scene):
            pool.append(generate_synthetic_scene(seed * 100_003 + i, resolution, label, patch_size))
    return pool


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    """``protocol`` is one of ``k_shot``, ``few_shot_one_per_scene``, ``zero_shot``."""

    protocol: str
    seed: int = 0
    k: int = 1
    train_scene: str = DEFAULT_ZERO_SHOT_TRAIN
    per_class_cap: int = 50
    val_per_class: int = 1
    test_per_class: int = 2

    def __post_init__(self):
        if self.protocol not in ("k_shot", "few_shot_one_per_scene", "zero_shot"):
            raise SplitError(f"unknown protocol {self.protocol!r}")
        if self.protocol == "k_shot" and not 1 <= self.k <= len(FEW_SHOT_CLASSES):
            raise SplitError(f"k must be in 1..{len(FEW_SHOT_CLASSES)}, got {self.k}")
        if self.per_class_cap < 1:
            raise SplitError("per_class_cap must be >= 1")


def _group_by_label(pool, labels_of, rng):
    groups: dict[str, list[int]] = {}
    for i, label in enumerate(labels_of):
        groups.setdefault(label, []).append(i)
    for label in groups:
        order = rng.permutation(len(groups[label]))
        groups[label] = [groups[label][j] for j in order]
    return groups


def _require(groups, label, needed):
    if label not in groups:
        raise SplitError(f"scene class {label!r} missing from pool")
    if len(groups[label]) < needed:
        raise SplitError(f"scene class {label!r} has {len(groups[label])} samples, need {needed}")


def make_split(pool: Sequence, spec: SplitSpec) -> tuple[list, list, list]:
    """Partition a sample pool into (train, val, test) per the few/zero-shot protocols.

    ``pool`` holds anything with a ``scene_label`` attribute (samples), or a
    manifest, in which case entries are split and returned as indices.
    """
    if isinstance(pool, DatasetManifest):
        labels_of = [e[2] for e in pool.entries]
        items = list(range(len(pool.entries)))
    else:
        labels_of = [s.scene_label for s in pool]
        items = list(pool)
    rng = np.random.default_rng(spec.seed)
    groups = _group_by_label(items, labels_of, rng)
    train, val, test = [], [], []

    if spec.protocol == "zero_shot":
        s = spec.train_scene
        _require(groups, s, spec.val_per_class + 1)
        idx = groups[s]
        val = idx[:spec.val_per_class]
        train = idx[spec.val_per_class:][:spec.per_class_cap]
        for label in sorted(groups):
            if label != s:
                test.extend(groups[label][:spec.test_per_class])
        if not test:
            raise SplitError("zero-shot split needs at least one scene besides the training scene")
    else:
        held = spec.val_per_class + spec.test_per_class
        for label in FEW_SHOT_CLASSES:
            _require(groups, label, held + (1 if spec.protocol == "k_shot" else 0))
            idx = groups[label]
            test.extend(idx[:spec.test_per_class])
            val.extend(idx[spec.test_per_class:held])
        if spec.protocol == "k_shot":
            for label in FEW_SHOT_CLASSES[:spec.k]:
                train.extend(groups[label][held:][:spec.per_class_cap])
        else:
            for label in sorted(groups):
                start = held if label in FEW_SHOT_CLASSES else 0
                if len(groups[label]) <= start:
                    raise SplitError(f"scene class {label!r} has no sample left for training")
                train.append(groups[label][start])
        train = [train[j] for j in rng.permutation(len(train))]

    pick = (lambda ids: ids) if isinstance(pool, DatasetManifest) else (lambda ids: [items[i] for i in ids])
    return pick(train), pick(val), pick(test)


# ---------------------------------------------------------------------------
# patches


def patchify(image, patch_size: int):
    """(…, H, W, C) → (…, N, p·p·C); patches row-major, pixels (row, col, channel) inside."""
    *lead, h, w, c = image.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"{h}x{w} image not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = image.reshape(*lead, gh, patch_size, gw, patch_size, c)
    n = len(lead)
    perm = (*range(n), n, n + 2, n + 1, n + 3, n + 4)
    x = x.transpose(perm) if isinstance(x, np.ndarray) else x.permute(*perm)
    return x.reshape(*lead, gh * gw, patch_size * patch_size * c)


def unpatchify(patches, patch_size: int, height: int, width: int, channels: int = 3):
    *lead, num, dim = patches.shape
    gh, gw = height // patch_size, width // patch_size
    if num != gh * gw or dim != patch_size * patch_size * channels:
        raise ShapeError(f"patch tensor {tuple(patches.shape)} does not tile {height}x{width}")
    x = patches.reshape(*lead, gh, gw, patch_size, patch_size, channels)
    n = len(lead)
    perm = (*range(n), n, n + 2, n + 1, n + 3, n + 4)
    x = x.transpose(perm) if isinstance(x, np.ndarray) else x.permute(*perm)
    return x.reshape(*lead, height, width, channels)
