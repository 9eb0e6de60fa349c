"""Combinatorial cropping of strongly annotated images.

For an image with label set ``L*`` every nonempty subset ``P`` defines a
binary mask (pixels of any class in ``P`` are foreground). For each subset
``n_p`` boxes enclosing that foreground are sampled, cropped and resized to
the network input size. Together with the untouched originals this gives
``N_s + n_p * sum_i (2**|L*_i| - 1)`` samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .synth import BACKGROUND, AnnotatedImage

MAX_POWERSET_LABELS = 12


@dataclass
class StrongExample:
    image: np.ndarray        # c x h x w
    mask: np.ndarray         # h x w, class index or BACKGROUND
    labels: tuple[int, ...]  # classes present in mask, ascending
    id: str = ""

    def __post_init__(self):
        present = tuple(sorted(int(v) for v in np.unique(self.mask) if v != BACKGROUND))
        if tuple(sorted(self.labels)) != present:
            raise ValueError(
                f"strong example {self.id or '?'}: labels {self.labels} differ from mask classes {present}")
        if not present:
            raise ValueError(f"strong example {self.id or '?'} has no foreground class")
        self.labels = present

    @classmethod
    def from_annotated(cls, ex: AnnotatedImage) -> "StrongExample":
        if ex.mask is None:
            raise ValueError(f"example {ex.id} has no mask")
        return cls(ex.image, ex.mask, tuple(ex.label_set), ex.id)


@dataclass
class CropSample:
    image: np.ndarray          # c x H x W at the target size
    mask: np.ndarray           # H x W, 0/1 uint8
    labels: tuple[int, ...]    # the label combination P
    box: tuple[int, int, int, int]   # x0, y0, x1, y1 (half-open) in source pixels
    source: int = 0            # index of the originating strong example


def powerset_nonempty(labels: Iterable[int]) -> list[tuple[int, ...]]:
    """All nonempty subsets, in binary counting order over the sorted labels."""
    items = sorted(set(int(l) for l in labels))
    if len(items) > MAX_POWERSET_LABELS:
        raise ValueError(
            f"refusing to enumerate the powerset of {len(items)} labels (max {MAX_POWERSET_LABELS})")
    out = []
    for bits in range(1, 1 << len(items)):
        out.append(tuple(items[i] for i in range(len(items)) if bits >> i & 1))
    return out


def binary_mask(full_mask: np.ndarray, subset: Iterable[int]) -> np.ndarray:
    """1 where the pixel's class belongs to ``subset``."""
    subset = sorted(set(int(l) for l in subset))
    present = set(int(v) for v in np.unique(full_mask)) - {BACKGROUND}
    absent = [l for l in subset if l not in present]
    if absent:
        raise ValueError(f"label(s) {absent} do not occur in the mask")
    return np.isin(full_mask, subset).astype(np.uint8)


def tight_box(z: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(z)
    if len(ys) == 0:
        raise ValueError("mask has no foreground pixel")
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def propose_boxes(z: np.ndarray, n: int, rng: np.random.Generator,
                  m_max: float = 0.5) -> list[tuple[int, int, int, int]]:
    """Dilate the tight foreground box by random per-side margins.

    Each margin is drawn uniformly from ``[0, m_max * side]`` (side = width
    for left/right, height for top/bottom) and the box is clamped to the
    image.
    """
    if m_max < 0:
        raise ValueError(f"m_max must be nonnegative, got {m_max}")
    h, w = z.shape
    x0, y0, x1, y1 = tight_box(z)
    bw, bh = x1 - x0, y1 - y0
    boxes = []
    for _ in range(n):
        left, right = rng.uniform(0.0, m_max * bw, size=2)
        top, bottom = rng.uniform(0.0, m_max * bh, size=2)
        boxes.append((
            max(0, x0 - int(left)),
            max(0, y0 - int(top)),
            min(w, x1 + int(right)),
            min(h, y1 + int(bottom)),
        ))
    return boxes


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a c x h x w image (pixel-centre aligned)."""
    c, h, w = image.shape
    th, tw = size
    if (h, w) == (th, tw):
        return image.astype(np.float64, copy=True)
    ys = (np.arange(th) + 0.5) * (h / th) - 0.5
    xs = (np.arange(tw) + 0.5) * (w / tw) - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([ndimage.map_coordinates(image[ch].astype(np.float64), grid, order=1,
                                             mode="nearest") for ch in range(c)])


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize; values are copied, never blended."""
    h, w = mask.shape
    th, tw = size
    rows = np.minimum(((np.arange(th) + 0.5) * (h / th)).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(tw) + 0.5) * (w / tw)).astype(np.int64), w - 1)
    return mask[np.ix_(rows, cols)].copy()


def crop_resize(image: np.ndarray, z: np.ndarray, box, size) -> tuple[np.ndarray, np.ndarray]:
    x0, y0, x1, y1 = box
    return (resize_image(image[:, y0:y1, x0:x1], size),
            resize_mask(z[y0:y1, x0:x1], size))


def expected_count(label_counts: Sequence[int], n_p: int) -> int:
    """``N_s + n_p * sum(2**k - 1)``."""
    return len(label_counts) + n_p * sum(2 ** k - 1 for k in label_counts)


def combinatorial_crop(strong_set: Sequence[StrongExample], n_p: int,
                       target_size: Optional[tuple[int, int]] = None, rng_seed: int = 0,
                       m_max: float = 0.5) -> list[CropSample]:
    """Expand a strong set by enumerating label combinations and cropping.

    Output order: for each image, its original (full image, ``P = L*``)
    followed by ``n_p`` crops per subset in powerset order. Each
    (image, subset) pair draws from its own generator seeded with
    ``(rng_seed, image index, subset bits)``.
    """
    if n_p < 0:
        raise ValueError(f"n_p must be nonnegative, got {n_p}")
    out: list[CropSample] = []
    for i, ex in enumerate(strong_set):
        h, w = ex.mask.shape
        size = tuple(target_size) if target_size is not None else (h, w)
        full = binary_mask(ex.mask, ex.labels)
        img, z = crop_resize(ex.image, full, (0, 0, w, h), size)
        out.append(CropSample(img, z, tuple(ex.labels), (0, 0, w, h), i))
        if n_p == 0:
            continue
        order = sorted(ex.labels)
        for subset in powerset_nonempty(order):
            bits = sum(1 << order.index(l) for l in subset)
            rng = np.random.default_rng([rng_seed, i, bits])
            zp = binary_mask(ex.mask, subset)
            for box in propose_boxes(zp, n_p, rng, m_max):
                img, zc = crop_resize(ex.image, zp, box, size)
                out.append(CropSample(img, zc, subset, box, i))
    return out
