"""Synthetic "shapes" dataset with image-level and pixel-level annotations.

Layout written by :func:`gen_dataset`::

    <root>/index.json
    <root>/<split>/images/<id>.png      8-bit RGB
    <root>/<split>/masks/<id>.png       8-bit gray, class index or 255 (strong only)

Splits are ``weak`` (labels only), ``strong`` (labels + masks) and
``test`` (labels + masks, held out). ``index.json`` holds::

    {"format": "decoseg-shapes", "version": 1, "num_classes": L,
     "class_names": [...], "image_size": [h, w],
     "examples": [{"id": ..., "split": ..., "kind": "weak" | "strong",
                   "image": "<relative path>", "labels": [0/1 x L],
                   "mask": "<relative path>" | null}, ...]}

Other datasets can be plugged in by writing the same manifest.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

BACKGROUND = 255
FORMAT_NAME = "decoseg-shapes"
FORMAT_VERSION = 1

CLASS_NAMES = ("disk", "square", "triangle", "ring")
CLASS_COLORS = np.array([
    [0.85, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.30, 0.90],
    [0.90, 0.80, 0.15],
])
RING_INNER = 0.55
SQUARE_HALF = 0.85
SPLITS = ("weak", "strong", "test")


class DatasetError(ValueError):
    """Invalid or inconsistent dataset on disk."""


@dataclass
class DatasetConfig:
    num_classes: int = 4
    image_size: tuple[int, int] = (64, 64)
    n_weak: int = 500
    n_strong: int = 100
    n_test: int = 100
    shapes_per_image: tuple[int, int] = (1, 3)
    radius_range: tuple[float, float] = (7.0, 14.0)
    noise: float = 0.05
    color_jitter: float = 0.06
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in [1, {len(CLASS_NAMES)}], got {self.num_classes}")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ValueError(f"bad shapes_per_image range {self.shapes_per_image}")
        rlo, rhi = self.radius_range
        if not 0 < rlo <= rhi or 2 * rhi >= min(self.image_size):
            raise ValueError(f"radius range {self.radius_range} does not fit {self.image_size}")
        for name in ("n_weak", "n_strong", "n_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.n_weak + self.n_strong + self.n_test == 0:
            raise ValueError("dataset would be empty")
        if self.noise < 0 or self.color_jitter < 0:
            raise ValueError("noise and color_jitter must be nonnegative")

    def count(self, split: str) -> int:
        return {"weak": self.n_weak, "strong": self.n_strong, "test": self.n_test}[split]


@dataclass
class Shape:
    cls: int
    cx: float
    cy: float
    radius: float
    angle: float = 0.0

    def inside(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Boolean coverage of pixel centres (xs, ys)."""
        dx, dy = xs - self.cx, ys - self.cy
        r = self.radius
        kind = CLASS_NAMES[self.cls]
        if kind == "disk":
            return dx * dx + dy * dy <= r * r
        if kind == "square":
            a = SQUARE_HALF * r
            return (np.abs(dx) <= a) & (np.abs(dy) <= a)
        if kind == "ring":
            d2 = dx * dx + dy * dy
            return (d2 <= r * r) & (d2 >= (RING_INNER * r) ** 2)
        # equilateral triangle inscribed in the circle of radius r
        angles = self.angle + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
        vx, vy = r * np.cos(angles), r * np.sin(angles)
        inside = np.ones(xs.shape, dtype=bool)
        for i in range(3):
            j = (i + 1) % 3
            cross = (vx[j] - vx[i]) * (dy - vy[i]) - (vy[j] - vy[i]) * (dx - vx[i])
            inside &= cross >= 0
        return inside


@dataclass
class AnnotatedImage:
    id: str
    split: str
    kind: str
    image: np.ndarray            # c x h x w in [0, 1]
    labels: np.ndarray           # L, int 0/1
    mask: Optional[np.ndarray] = None   # h x w uint8, BACKGROUND = 255

    @property
    def label_set(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.labels)]


@dataclass
class Scene:
    image: np.ndarray            # h x w x 3 float in [0, 1]
    mask: np.ndarray             # h x w uint8
    shapes: list = field(default_factory=list)

    @property
    def labels(self) -> list[int]:
        return sorted(int(v) for v in np.unique(self.mask) if v != BACKGROUND)


def sample_scene(config: DatasetConfig, rng: np.random.Generator) -> Scene:
    """Draw one image; later shapes occlude earlier ones."""
    h, w = config.image_size
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    base = rng.uniform(0.35, 0.55)
    image = np.full((h, w, 3), base) + rng.uniform(-0.05, 0.05, size=3)
    mask = np.full((h, w), BACKGROUND, dtype=np.uint8)
    n = int(rng.integers(config.shapes_per_image[0], config.shapes_per_image[1] + 1))
    shapes = []
    for _ in range(n):
        cls = int(rng.integers(config.num_classes))
        r = float(rng.uniform(*config.radius_range))
        cx = float(rng.uniform(r, w - r))
        cy = float(rng.uniform(r, h - r))
        shape = Shape(cls, cx, cy, r, float(rng.uniform(0, 2 * np.pi)))
        cover = shape.inside(xs, ys)
        color = np.clip(CLASS_COLORS[cls] + rng.uniform(-1, 1, size=3) * config.color_jitter, 0, 1)
        image[cover] = color
        mask[cover] = cls
        shapes.append(shape)
    if config.noise > 0:
        image = image + rng.normal(0.0, config.noise, size=image.shape)
    return Scene(np.clip(image, 0.0, 1.0), mask, shapes)


def _split_code(split: str) -> int:
    return SPLITS.index(split)


def _example_id(split: str, i: int) -> str:
    return f"{split}_{i:05d}"


def gen_dataset(config: DatasetConfig, root) -> dict:
    """Write the dataset under ``root`` and return the manifest."""
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {root}: {exc}") from exc
    if not os.access(root, os.W_OK):
        raise DatasetError(f"dataset directory {root} is not writable")

    examples = []
    for split in SPLITS:
        n = config.count(split)
        if n == 0:
            continue
        strong = split != "weak"
        (root / split / "images").mkdir(parents=True, exist_ok=True)
        if strong:
            (root / split / "masks").mkdir(parents=True, exist_ok=True)
        for i in range(n):
            rng = np.random.default_rng([config.seed, _split_code(split), i])
            scene = sample_scene(config, rng)
            ex_id = _example_id(split, i)
            img_rel = f"{split}/images/{ex_id}.png"
            pixels = np.round(scene.image * 255.0).astype(np.uint8)
            Image.fromarray(pixels, mode="RGB").save(root / img_rel, optimize=False)
            mask_rel = None
            if strong:
                mask_rel = f"{split}/masks/{ex_id}.png"
                Image.fromarray(scene.mask, mode="L").save(root / mask_rel, optimize=False)
            labels = [0] * config.num_classes
            for c in scene.labels:
                labels[c] = 1
            examples.append({
                "id": ex_id, "split": split, "kind": "strong" if strong else "weak",
                "image": img_rel, "labels": labels, "mask": mask_rel,
            })

    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "num_classes": config.num_classes,
        "class_names": list(CLASS_NAMES[:config.num_classes]),
        "image_size": list(config.image_size),
        "seed": config.seed,
        "examples": examples,
    }
    with open(root / "index.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    logger.info("wrote %d examples to %s", len(examples), root)
    return manifest


def read_manifest(root) -> dict:
    root = Path(root)
    path = root / "index.json"
    if not path.is_file():
        raise DatasetError(f"no index.json in {root}")
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from exc
    if manifest.get("format") != FORMAT_NAME or manifest.get("version") != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported manifest format")
    return manifest


def load_dataset(root, split: Optional[str] = None,
                 ids: Optional[Sequence[str]] = None) -> list[AnnotatedImage]:
    """Load and validate examples; pixel values are scaled to [0, 1]."""
    root = Path(root)
    manifest = read_manifest(root)
    n_cls = int(manifest["num_classes"])
    size = tuple(manifest["image_size"])
    wanted = None if ids is None else set(ids)
    out = []
    for entry in manifest["examples"]:
        if split is not None and entry["split"] != split:
            continue
        if wanted is not None and entry["id"] not in wanted:
            continue
        out.append(_load_example(root, entry, n_cls, size))
    return out


def _load_example(root: Path, entry: dict, n_cls: int, size: tuple) -> AnnotatedImage:
    ex_id = entry.get("id", "?")
    labels = np.asarray(entry.get("labels", []), dtype=np.int64)
    if labels.shape != (n_cls,) or not np.all((labels == 0) | (labels == 1)):
        raise DatasetError(f"example {ex_id}: label vector must be {n_cls} values in {{0, 1}}")
    img_path = root / entry["image"]
    if not img_path.is_file():
        raise DatasetError(f"example {ex_id}: missing image file {img_path}")
    try:
        with Image.open(img_path) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise DatasetError(f"example {ex_id}: unreadable image {img_path} ({exc})") from exc
    if pixels.shape[:2] != size:
        raise DatasetError(f"example {ex_id}: image size {pixels.shape[:2]} != {size}")
    image = (pixels / 255.0).transpose(2, 0, 1).copy()

    mask = None
    if entry.get("kind") == "strong":
        if not entry.get("mask"):
            raise DatasetError(f"example {ex_id}: strong example without a mask")
        mask_path = root / entry["mask"]
        if not mask_path.is_file():
            raise DatasetError(f"example {ex_id}: missing mask file {mask_path}")
        try:
            with Image.open(mask_path) as im:
                if im.mode not in ("L", "P"):
                    raise DatasetError(f"example {ex_id}: mask must be single-channel, got {im.mode}")
                mask = np.asarray(im, dtype=np.uint8).copy()
        except OSError as exc:
            raise DatasetError(f"example {ex_id}: unreadable mask {mask_path} ({exc})") from exc
        if mask.shape != size:
            raise DatasetError(f"example {ex_id}: mask size {mask.shape} != {size}")
        values = np.unique(mask)
        bad = [int(v) for v in values if v != BACKGROUND and v >= n_cls]
        if bad:
            raise DatasetError(f"example {ex_id}: mask contains invalid class values {bad}")
        present = np.zeros(n_cls, dtype=np.int64)
        present[[int(v) for v in values if v != BACKGROUND]] = 1
        if not np.array_equal(present, labels):
            raise DatasetError(
                f"example {ex_id}: label vector {labels.tolist()} disagrees with mask "
                f"classes {present.tolist()}")
    elif entry.get("kind") != "weak":
        raise DatasetError(f"example {ex_id}: unknown annotation kind {entry.get('kind')!r}")
    return AnnotatedImage(ex_id, entry.get("split", ""), entry["kind"], image, labels, mask)


def stack_images(examples: Sequence[AnnotatedImage]) -> np.ndarray:
    return np.stack([e.image for e in examples])


def stack_labels(examples: Sequence[AnnotatedImage]) -> np.ndarray:
    return np.stack([e.labels for e in examples]).astype(np.float64)
