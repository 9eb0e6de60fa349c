"""Full-image segmentation by classify -> bridge per label -> segment -> merge.

Every identified class ``l`` gets a foreground map from its own activation
map; one extra activation map built from the whole identified label set
supplies the background map. Each pixel takes the argmax over these
candidates, background winning ties, then lower class indices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from PIL import Image

from .bridging import BridgeParams, all_class_saliencies, bridge_forward, combine_saliencies, spatial_features
from .classnet import ClassNetParams, cls_forward, identify_labels
from .engine import Tensor
from .segnet import SegNetParams, seg_forward
from .synth import BACKGROUND


@dataclass
class SegmentationResult:
    label_mask: np.ndarray                 # h x w uint8, BACKGROUND where no class wins
    labels: list[int]                      # identified classes
    scores: np.ndarray                     # L logits
    fg_maps: dict[int, np.ndarray] = field(default_factory=dict)   # class -> h x w
    bg_map: Optional[np.ndarray] = None    # h x w background prob. of the combined map


def merge_label_maps(fg_maps: Mapping[int, np.ndarray], bg_map: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over background and per-class foreground maps."""
    classes = sorted(fg_maps)
    stack = np.stack([bg_map] + [fg_maps[c] for c in classes])
    winner = stack.argmax(axis=0)  # first maximum -> background, then ascending class
    lut = np.array([BACKGROUND] + classes, dtype=np.uint8)
    return lut[winner]


def _check_compatible(cls_params: ClassNetParams, bridge: BridgeParams, seg: SegNetParams) -> None:
    c_feat = cls_params.arch.feature_shape[0]
    if bridge.channels != c_feat:
        raise ValueError(f"bridge expects {bridge.channels} channels, classifier yields {c_feat}")
    if seg.arch.in_channels != c_feat:
        raise ValueError(f"segmentation net expects {seg.arch.in_channels} channels, "
                         f"classifier yields {c_feat}")
    if len(seg.arch.stage_widths) != len(cls_params.arch.widths):
        raise ValueError("segmentation net does not mirror the classifier's pooling layers")


def segment_image(image: np.ndarray, cls_params: ClassNetParams, bridge: BridgeParams,
                  seg: SegNetParams, tau: float = 0.5) -> SegmentationResult:
    """Semantic segmentation of one c x h x w image."""
    _check_compatible(cls_params, bridge, seg)
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ValueError(f"segment_image handles one image at a time, got batch {x.shape[0]}")
    scores, cache = cls_forward(x, cls_params)
    labels = identify_labels(scores.data[0], tau)
    h, w = x.shape[2:]
    if not labels:
        return SegmentationResult(np.full((h, w), BACKGROUND, dtype=np.uint8), [],
                                  scores.data[0].copy())

    per_class = all_class_saliencies(cls_params, cache)
    n = len(labels)
    sal = np.concatenate([per_class[0, labels], combine_saliencies(per_class, labels)], axis=0)
    spat = np.repeat(spatial_features(cache).data, n + 1, axis=0)
    switches = [sw.take([0] * (n + 1)) for sw in cache.switches]
    act = bridge_forward(Tensor(spat), Tensor(sal), bridge)
    probs, _ = seg_forward(act, switches, seg)
    p = probs.data
    fg = {l: p[i, 0].copy() for i, l in enumerate(labels)}
    bg = p[n, 1].copy()
    return SegmentationResult(merge_label_maps(fg, bg), labels, scores.data[0].copy(), fg, bg)


# --------------------------------------------------------------------------
# evaluation


def iou(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    """Intersection over union of one class; NaN when absent from both."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    p, g = pred == cls, gt == cls
    union = np.count_nonzero(p | g)
    if union == 0:
        return float("nan")
    return np.count_nonzero(p & g) / union


@dataclass
class IouReport:
    per_class: dict[int, float]
    intersection: dict[int, int]
    union: dict[int, int]
    mean: float
    class_names: dict[int, str] = field(default_factory=dict)

    def name(self, c: int) -> str:
        if c == BACKGROUND:
            return "background"
        return self.class_names.get(c, f"class{c}")

    def table(self) -> str:
        lines = [f"{'class':<14}{'IoU':>8}{'inter':>10}{'union':>10}"]
        for c in sorted(self.union, key=lambda k: (k != BACKGROUND, k)):
            val = self.per_class.get(c)
            shown = f"{val:8.4f}" if val is not None else f"{'-':>8}"
            lines.append(f"{self.name(c):<14}{shown}{self.intersection[c]:>10d}{self.union[c]:>10d}")
        lines.append(f"{'mean':<14}{self.mean:8.4f}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "mean_iou": self.mean,
            "classes": [
                {"class": self.name(c), "index": int(c), "iou": self.per_class.get(c),
                 "intersection": int(self.intersection[c]), "union": int(self.union[c])}
                for c in sorted(self.union, key=lambda k: (k != BACKGROUND, k))
            ],
        }


def mean_iou(pairs: Iterable[tuple[np.ndarray, np.ndarray]], classes: Sequence[int],
             include_background: bool = True,
             class_names: Optional[Sequence[str]] = None) -> IouReport:
    """Dataset-level IoU: counts are summed over all pairs before dividing.

    Classes with an empty union are reported with ``None`` and left out of
    the mean.
    """
    evaluated = [int(c) for c in classes]
    if include_background and BACKGROUND not in evaluated:
        evaluated.append(BACKGROUND)
    inter = {c: 0 for c in evaluated}
    union = {c: 0 for c in evaluated}
    for pred, gt in pairs:
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
        for c in evaluated:
            p, g = pred == c, gt == c
            inter[c] += int(np.count_nonzero(p & g))
            union[c] += int(np.count_nonzero(p | g))
    per_class = {c: (inter[c] / union[c] if union[c] else None) for c in evaluated}
    scored = [v for v in per_class.values() if v is not None]
    names = {i: n for i, n in enumerate(class_names or [])}
    return IouReport(per_class, inter, union, float(np.mean(scored)) if scored else float("nan"),
                     names)


def label_accuracy(scores: np.ndarray, labels: np.ndarray, tau: float = 0.5) -> float:
    """Fraction of (image, class) decisions that match the label vectors."""
    probs = 1.0 / (1.0 + np.exp(-np.asarray(scores, dtype=np.float64)))
    return float(np.mean((probs >= tau) == (np.asarray(labels) == 1)))


# --------------------------------------------------------------------------
# export

PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [0, 130, 200], [255, 225, 25],
    [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230],
    [210, 245, 60], [250, 190, 212], [0, 128, 128], [220, 190, 255],
], dtype=np.uint8)


def palette_bytes() -> list[int]:
    pal = np.zeros((256, 3), dtype=np.uint8)
    for i in range(BACKGROUND):
        pal[i] = PALETTE[i % len(PALETTE)]
    pal[BACKGROUND] = 0
    return pal.reshape(-1).tolist()


def save_label_mask(mask: np.ndarray, path) -> None:
    im = Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="P")
    im.putpalette(palette_bytes())
    im.save(path)


def read_label_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint8).copy()


def heatmap(prob: np.ndarray) -> np.ndarray:
    return np.round(np.clip(prob, 0.0, 1.0) * 255.0).astype(np.uint8)


def export_masks(results: Iterable[tuple[str, SegmentationResult]], path) -> list[Path]:
    """Write color-coded label masks and per-class foreground heatmaps."""
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, res in results:
        mask_path = out_dir / f"{name}_mask.png"
        save_label_mask(res.label_mask, mask_path)
        written.append(mask_path)
        for c, prob in sorted(res.fg_maps.items()):
            hp = out_dir / f"{name}_fg{c}.png"
            Image.fromarray(heatmap(prob), mode="L").save(hp)
            written.append(hp)
        if res.bg_map is not None:
            hp = out_dir / f"{name}_bg.png"
            Image.fromarray(heatmap(res.bg_map), mode="L").save(hp)
            written.append(hp)
    return written


def write_report(report: IouReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1)
        fh.write("\n")
