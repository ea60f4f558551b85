"""Synthetic defect dataset generation, loading, and episodic sampling.

Images are 8-bit grayscale with per-class intensity signatures plus noise;
masks carry raw class ids. Eight defect shapes (ids 1..8) sit on a background
class 0 that dominates by construction. Episodes relabel a sampled subset of
defect classes to a compact {0..n} space with disjoint support/query images.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import ContractViolationError, DatasetError, UnderPopulatedClassError

NUM_CLASSES = 9
CLASS_NAMES = (
    "background", "crack", "hole", "root", "deposit",
    "joint_offset", "fracture", "water", "encrustation",
)
# additive gray-level offset applied wherever a class occupies the mask
_CLASS_INTENSITY = np.array([0, -60, -80, -40, 50, -30, -55, -25, 65], dtype=np.float64)

SPLIT_NAMES = ("train", "val", "test")


@dataclass
class DatasetMeta:
    num_classes: int = NUM_CLASSES
    image_size: int = 128
    seed: int = 0
    class_frequencies: tuple[float, ...] = ()
    splits: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ContractViolationError("need at least background plus one class")
        if self.class_frequencies:
            total = float(sum(self.class_frequencies))
            if abs(total - 1.0) > 1e-6:
                raise ContractViolationError(f"class frequencies sum to {total}, expected 1")
            bg = self.class_frequencies[0]
            if any(bg <= f for f in self.class_frequencies[1:]):
                raise ContractViolationError("background must be the strictly largest class")

    def to_json(self) -> str:
        payload = {
            "num_classes": self.num_classes,
            "image_size": self.image_size,
            "seed": self.seed,
            "class_frequencies": list(self.class_frequencies),
            "splits": {k: list(v) for k, v in self.splits.items()},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetMeta":
        raw = json.loads(text)
        return cls(
            num_classes=int(raw["num_classes"]),
            image_size=int(raw["image_size"]),
            seed=int(raw["seed"]),
            class_frequencies=tuple(float(f) for f in raw.get("class_frequencies", ())),
            splits={k: tuple(int(i) for i in v) for k, v in raw.get("splits", {}).items()},
        )


def _walk(rng, s: float, start, heading: float, segments: int,
          step_lo: float, step_hi: float, wobble: float):
    x, y = start
    pts = [(x, y)]
    for _ in range(segments):
        heading += float(rng.uniform(-wobble, wobble))
        step = float(rng.uniform(step_lo, step_hi)) * s
        x += step * math.cos(heading)
        y += step * math.sin(heading)
        pts.append((x, y))
    return pts


def _paint_crack(draw, s, rng, cid):
    start = (float(rng.uniform(0.15, 0.85)) * s, float(rng.uniform(0.0, 0.2)) * s)
    heading = float(rng.uniform(0.3 * math.pi, 0.7 * math.pi))
    pts = _walk(rng, s, start, heading, int(rng.integers(6, 10)), 0.18, 0.32, 0.45)
    draw.line(pts, fill=cid, width=max(2, round(0.06 * s)), joint="curve")


def _paint_hole(draw, s, rng, cid):
    cx = float(rng.uniform(0.25, 0.75)) * s
    cy = float(rng.uniform(0.25, 0.75)) * s
    rx = float(rng.uniform(0.13, 0.22)) * s
    ry = float(rng.uniform(0.13, 0.22)) * s
    draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=cid)


def _paint_root(draw, s, rng, cid):
    start = (float(rng.uniform(0.2, 0.8)) * s, float(rng.uniform(0.0, 0.2)) * s)
    main = _walk(rng, s, start, 0.5 * math.pi, int(rng.integers(4, 7)), 0.14, 0.26, 0.45)
    draw.line(main, fill=cid, width=max(2, round(0.04 * s)), joint="curve")
    for _ in range(int(rng.integers(2, 4))):
        bx, by = main[int(rng.integers(1, len(main)))]
        heading = float(rng.uniform(0.0, 2.0 * math.pi))
        branch = _walk(rng, s, (bx, by), heading, 2, 0.10, 0.20, 0.6)
        draw.line(branch, fill=cid, width=max(1, round(0.025 * s)))


def _paint_deposit(draw, s, rng, cid):
    cx = float(rng.uniform(0.25, 0.75)) * s
    cy = float(rng.uniform(0.25, 0.75)) * s
    for _ in range(int(rng.integers(4, 6))):
        dx = float(rng.uniform(-0.07, 0.07)) * s
        dy = float(rng.uniform(-0.07, 0.07)) * s
        r = float(rng.uniform(0.07, 0.12)) * s
        draw.ellipse([cx + dx - r, cy + dy - r, cx + dx + r, cy + dy + r], fill=cid)


def _paint_joint_offset(draw, s, rng, cid):
    w = float(rng.uniform(0.05, 0.09)) * s
    pos = float(rng.uniform(0.2, 0.7)) * s
    cut = float(rng.uniform(0.3, 0.7)) * s
    off = float(rng.uniform(0.03, 0.07)) * s * (1.0 if rng.random() < 0.5 else -1.0)
    if rng.random() < 0.5:
        draw.rectangle([0, pos, cut, pos + w], fill=cid)
        draw.rectangle([cut, pos + off, s, pos + w + off], fill=cid)
    else:
        draw.rectangle([pos, 0, pos + w, cut], fill=cid)
        draw.rectangle([pos + off, cut, pos + w + off, s], fill=cid)


def _paint_fracture(draw, s, rng, cid):
    cx = float(rng.uniform(0.3, 0.7)) * s
    cy = float(rng.uniform(0.3, 0.7)) * s
    n = int(rng.integers(7, 11))
    angles = np.sort(rng.uniform(0.0, 2.0 * math.pi, size=n))
    pts = []
    for a in angles:
        r = float(rng.uniform(0.12, 0.24)) * s
        pts.append((cx + r * math.cos(a), cy + r * math.sin(a)))
    draw.polygon(pts, fill=cid)


def _paint_water(draw, s, rng, cid):
    level = float(rng.uniform(0.75, 0.90)) * s
    xs = np.linspace(0.0, s, 9)
    top = [(float(x), level + float(rng.uniform(-0.03, 0.03)) * s) for x in xs]
    draw.polygon(top + [(s, s), (0.0, s)], fill=cid)


def _paint_encrustation(draw, s, rng, cid):
    cx = float(rng.uniform(0.3, 0.7)) * s
    cy = float(rng.uniform(0.3, 0.7)) * s
    r = float(rng.uniform(0.14, 0.22)) * s
    draw.ellipse([cx - r, cy - r, cx + r, cy + r],
                 outline=cid, width=max(2, round(0.07 * s)))


_PAINTERS = {
    1: _paint_crack,
    2: _paint_hole,
    3: _paint_root,
    4: _paint_deposit,
    5: _paint_joint_offset,
    6: _paint_fracture,
    7: _paint_water,
    8: _paint_encrustation,
}


def _render_image(mask: np.ndarray, rng) -> np.ndarray:
    s = mask.shape[0]
    yy, xx = np.mgrid[0:s, 0:s] / float(s)
    direction = float(rng.uniform(0.0, 2.0 * math.pi))
    base = 120.0 + 15.0 * (math.cos(direction) * xx + math.sin(direction) * yy)
    img = base + _CLASS_INTENSITY[mask] + rng.normal(0.0, 10.0, size=mask.shape)
    return np.clip(img, 0.0, 255.0).astype(np.uint8)


def generate_dataset(root, num_images: int, image_size: int = 128, seed: int = 0) -> DatasetMeta:
    """Write an image/mask corpus plus meta.json under root, fully seeded."""
    if num_images < NUM_CLASSES * 10:
        raise ContractViolationError(
            f"need at least {NUM_CLASSES * 10} images for class coverage, got {num_images}")
    if image_size < 16:
        raise ContractViolationError("image size below 16 leaves no room for shapes")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    pixel_counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for idx in range(num_images):
        canvas = Image.new("L", (image_size, image_size), 0)
        draw = ImageDraw.Draw(canvas)
        primary = 1 + idx % (NUM_CLASSES - 1)
        u = rng.random()
        extras = 0 if u < 0.25 else (1 if u < 0.8 else 2)
        for _ in range(extras):
            extra = 1 + int(rng.integers(0, NUM_CLASSES - 1))
            _PAINTERS[extra](draw, float(image_size), rng, extra)
        _PAINTERS[primary](draw, float(image_size), rng, primary)  # painted last, stays on top
        mask = np.asarray(canvas, dtype=np.uint8)
        pixel_counts += np.bincount(mask.reshape(-1), minlength=NUM_CLASSES)
        image = _render_image(mask, rng)
        Image.fromarray(image, mode="L").save(root / "images" / f"{idx:05d}.png")
        Image.fromarray(mask, mode="L").save(root / "masks" / f"{idx:05d}.png")

    order = rng.permutation(num_images)
    n_train = int(round(num_images * 0.70))
    n_val = int(round(num_images * 0.15))
    splits = {
        "train": tuple(int(i) for i in np.sort(order[:n_train])),
        "val": tuple(int(i) for i in np.sort(order[n_train:n_train + n_val])),
        "test": tuple(int(i) for i in np.sort(order[n_train + n_val:])),
    }
    freqs = tuple(float(f) for f in pixel_counts / pixel_counts.sum())
    meta = DatasetMeta(num_classes=NUM_CLASSES, image_size=image_size, seed=seed,
                       class_frequencies=freqs, splits=splits)
    meta.validate()
    (root / "meta.json").write_text(meta.to_json())
    return meta


@dataclass
class LoadedDataset:
    meta: DatasetMeta
    images: list[np.ndarray]
    masks: list[np.ndarray]
    class_index: dict[int, dict[int, int]]

    @property
    def num_images(self) -> int:
        return len(self.images)

    def split_ids(self, split: str) -> tuple[int, ...]:
        if split not in self.meta.splits:
            raise DatasetError(f"unknown split {split!r}, have {sorted(self.meta.splits)}")
        return self.meta.splits[split]

    def eligible_images(self, class_id: int, min_pixels: int, pool=None) -> list[int]:
        per_image = self.class_index.get(class_id, {})
        ids = per_image.keys() if pool is None else (i for i in pool if i in per_image)
        return sorted(i for i in ids if per_image[i] >= min_pixels)


def load_dataset(root) -> LoadedDataset:
    root = Path(root)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DatasetError(f"no samples found under {root}")
    meta = DatasetMeta.from_json(meta_path.read_text())
    meta.validate()

    image_paths = sorted((root / "images").glob("*.png"))
    if not image_paths:
        raise DatasetError(f"no samples found under {root}")
    images, masks = [], []
    class_index: dict[int, dict[int, int]] = {c: {} for c in range(meta.num_classes)}
    for idx, image_path in enumerate(image_paths):
        mask_path = root / "masks" / image_path.name
        if not mask_path.exists():
            raise DatasetError(f"missing mask for image {image_path.name}")
        image = np.asarray(Image.open(image_path), dtype=np.uint8)
        mask = np.asarray(Image.open(mask_path), dtype=np.uint8)
        if image.shape != (meta.image_size, meta.image_size):
            raise DatasetError(f"size mismatch for {image_path.name}: {image.shape}")
        if mask.shape != image.shape:
            raise DatasetError(f"size mismatch between image and mask {image_path.name}")
        if int(mask.max(initial=0)) >= meta.num_classes:
            raise DatasetError(
                f"label out of range in {mask_path.name}: {int(mask.max())}")
        counts = np.bincount(mask.reshape(-1), minlength=meta.num_classes)
        for c in range(meta.num_classes):
            if counts[c] > 0:
                class_index[c][idx] = int(counts[c])
        images.append(image)
        masks.append(mask)
    return LoadedDataset(meta=meta, images=images, masks=masks, class_index=class_index)


@dataclass
class EpisodeSpec:
    n_ways: int = 2
    k_shots: int = 5
    n_query: int = 1
    min_class_pixels: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_ways < 1:
            raise ContractViolationError("n_ways must be at least 1")
        if self.k_shots < 1 or self.n_query < 1:
            raise ContractViolationError("k_shots and n_query must be at least 1")
        if self.min_class_pixels < 1:
            raise ContractViolationError("min_class_pixels must be positive")


@dataclass
class Episode:
    support_images: np.ndarray   # (n*k, H, W, 1) float32 in [0, 1]
    support_masks: np.ndarray    # (n*k, H, W) int64, episode label space
    support_classes: tuple[int, ...]
    query_images: np.ndarray     # (n_query, H, W, 1)
    query_masks: np.ndarray
    class_map: dict[int, int]    # dataset id -> episode id
    episode_classes: tuple[int, ...]
    support_ids: tuple[int, ...]
    query_ids: tuple[int, ...]
    n_ways: int
    k_shot: int

    @property
    def local_classes(self) -> tuple[int, ...]:
        return tuple(range(self.n_ways + 1))


def _to_episode_space(mask: np.ndarray, class_map: dict[int, int]) -> np.ndarray:
    out = np.zeros(mask.shape, dtype=np.int64)
    for original, local in class_map.items():
        out[mask == original] = local
    return out


def sample_episode(dataset: LoadedDataset, spec: EpisodeSpec, rng,
                   split: str = "train") -> Episode:
    """Draw an n-way k-shot episode from one split of the dataset."""
    k_classes = dataset.meta.num_classes
    if spec.n_ways > k_classes - 1:
        raise ContractViolationError(
            f"n_ways {spec.n_ways} exceeds the {k_classes - 1} defect classes")
    pool = dataset.split_ids(split)

    defects = np.arange(1, k_classes)
    chosen = rng.choice(defects, size=spec.n_ways, replace=False)
    episode_classes = tuple(int(c) for c in chosen)
    class_map = {c: j + 1 for j, c in enumerate(episode_classes)}

    support_ids: list[int] = []
    support_classes: list[int] = []
    for c in episode_classes:
        eligible = dataset.eligible_images(c, spec.min_class_pixels, pool)
        if len(eligible) < spec.k_shots:
            raise UnderPopulatedClassError(
                f"class {c} ({CLASS_NAMES[c]}) has {len(eligible)} eligible images in "
                f"split {split!r}, need {spec.k_shots}")
        picks = rng.choice(np.array(eligible), size=spec.k_shots, replace=False)
        support_ids.extend(int(i) for i in picks)
        support_classes.extend([class_map[c]] * spec.k_shots)

    taken = set(support_ids)
    query_pool = sorted(
        i for i in pool if i not in taken
        and any(i in dataset.class_index[c] for c in episode_classes))
    if len(query_pool) < spec.n_query:
        raise DatasetError(
            f"query pool has {len(query_pool)} images in split {split!r}, "
            f"need {spec.n_query}")
    query_ids = [int(i) for i in rng.choice(np.array(query_pool),
                                            size=spec.n_query, replace=False)]

    def gather(ids):
        imgs = np.stack([dataset.images[i] for i in ids]).astype(np.float32) / 255.0
        msks = np.stack([_to_episode_space(dataset.masks[i], class_map) for i in ids])
        return imgs[..., None], msks

    support_images, support_masks = gather(support_ids)
    query_images, query_masks = gather(query_ids)
    return Episode(
        support_images=support_images,
        support_masks=support_masks,
        support_classes=tuple(support_classes),
        query_images=query_images,
        query_masks=query_masks,
        class_map=class_map,
        episode_classes=episode_classes,
        support_ids=tuple(support_ids),
        query_ids=tuple(query_ids),
        n_ways=spec.n_ways,
        k_shot=spec.k_shots,
    )
