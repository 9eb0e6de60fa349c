"""Two-stage training and evaluation on the shapes dataset.

Stage one fits the classifier on weak labels. Stage two freezes it and fits
the bridging layers and the segmentation network on combinatorially
cropped strong examples. :func:`run_desk_experiment` repeats stage two for
several strong-set sizes and for the strong-only ablation, where the
classifier only sees labels derived from the strong images.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .augment import StrongExample, combinatorial_crop
from .bridging import BridgeParams
from .classnet import ClassNetArch, ClassNetParams, TrainConfig, predict_scores, train_classification
from .inference import IouReport, label_accuracy, mean_iou, segment_image
from .segnet import SegNetParams, fresh_models, train_segmentation
from .synth import AnnotatedImage, DatasetConfig, gen_dataset, load_dataset, read_manifest, stack_images, stack_labels

logger = logging.getLogger(__name__)

DESK_CLS_TRAIN = TrainConfig(lr=0.02, momentum=0.9, weight_decay=5e-4, epochs=20, batch_size=16)
DESK_SEG_TRAIN = TrainConfig(lr=0.05, momentum=0.9, weight_decay=5e-4, epochs=1000, batch_size=16,
                             max_steps=1200)


@dataclass
class ExperimentConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    strong_per_class: tuple[int, ...] = (5, 10, 25)
    ablation_per_class: Optional[int] = 5
    n_p: int = 20
    m_max: float = 0.5
    tau: float = 0.5
    cls_train: TrainConfig = field(default_factory=lambda: TrainConfig(**vars(DESK_CLS_TRAIN)))
    seg_train: TrainConfig = field(default_factory=lambda: TrainConfig(**vars(DESK_SEG_TRAIN)))
    seed: int = 0


@dataclass
class SegRun:
    per_class: int
    n_strong: int
    n_samples: int
    report: IouReport
    history: list[float]
    seconds: float


@dataclass
class ExperimentResult:
    label_accuracy: float
    cls_history: list[float]
    runs: dict[int, SegRun]
    ablation: Optional[SegRun]
    ablation_label_accuracy: Optional[float]
    seconds: float

    def summary(self) -> str:
        lines = [f"classifier label accuracy: {self.label_accuracy:.4f}"]
        for k, run in sorted(self.runs.items()):
            lines.append(f"semi-supervised, {k:>2}/class ({run.n_strong} strong, "
                         f"{run.n_samples} samples): mIoU {run.report.mean:.4f}")
        if self.ablation is not None:
            lines.append(f"strong-only ablation, {self.ablation.per_class}/class: "
                         f"mIoU {self.ablation.report.mean:.4f} "
                         f"(label accuracy {self.ablation_label_accuracy:.4f})")
        lines.append(f"total time: {self.seconds:.0f} s")
        return "\n".join(lines)


def select_strong(pool: Sequence[AnnotatedImage], per_class: int, num_classes: int) -> list[AnnotatedImage]:
    """First ``per_class * num_classes`` strong images; larger sets contain smaller ones."""
    n = per_class * num_classes
    if n > len(pool):
        raise ValueError(f"need {n} strong images, pool has {len(pool)}")
    return list(pool[:n])


def train_classifier_stage(images: np.ndarray, labels: np.ndarray, arch: ClassNetArch,
                           cfg: TrainConfig, seed: int) -> tuple[ClassNetParams, list[float]]:
    params = ClassNetParams.init(arch, np.random.default_rng([seed, 1]))
    return train_classification(images, labels, params, cfg, rng_seed=seed)


def train_segmentation_stage(strong: Sequence[AnnotatedImage], cls_params: ClassNetParams,
                             n_p: int, cfg: TrainConfig, seed: int, m_max: float = 0.5,
                             ) -> tuple[BridgeParams, SegNetParams, list[float], int]:
    examples = [StrongExample.from_annotated(e) for e in strong]
    samples = combinatorial_crop(examples, n_p, cls_params.arch.input_size, rng_seed=seed,
                                 m_max=m_max)
    bridge, seg = fresh_models(cls_params.arch, np.random.default_rng([seed, 2]))
    bridge, seg, history = train_segmentation(samples, cls_params, bridge, seg, cfg, rng_seed=seed)
    return bridge, seg, history, len(samples)


def evaluate(examples: Sequence[AnnotatedImage], cls_params: ClassNetParams, bridge: BridgeParams,
             seg: SegNetParams, tau: float = 0.5, include_background: bool = True,
             class_names: Optional[Sequence[str]] = None) -> IouReport:
    pairs = []
    for ex in examples:
        if ex.mask is None:
            raise ValueError(f"example {ex.id} has no ground-truth mask")
        pairs.append((segment_image(ex.image, cls_params, bridge, seg, tau).label_mask, ex.mask))
    return mean_iou(pairs, range(cls_params.arch.num_classes), include_background, class_names)


def run_desk_experiment(cfg: ExperimentConfig, workdir) -> ExperimentResult:
    t0 = time.perf_counter()
    root = Path(workdir) / "shapes"
    if not (root / "index.json").is_file():
        gen_dataset(cfg.data, root)
    names = read_manifest(root)["class_names"]
    weak = load_dataset(root, "weak")
    pool = load_dataset(root, "strong")
    test = load_dataset(root, "test")
    n_cls = cfg.data.num_classes
    arch = ClassNetArch(num_classes=n_cls, input_size=tuple(cfg.data.image_size))
    test_images, test_labels = stack_images(test), stack_labels(test)

    cls_params, cls_hist = train_classifier_stage(
        stack_images(weak), stack_labels(weak), arch, cfg.cls_train, cfg.seed)
    acc = label_accuracy(predict_scores(test_images, cls_params), test_labels, cfg.tau)
    logger.info("classifier label accuracy %.4f (%.0f s)", acc, time.perf_counter() - t0)

    def seg_run(per_class: int, classifier: ClassNetParams) -> SegRun:
        t = time.perf_counter()
        strong = select_strong(pool, per_class, n_cls)
        bridge, seg, hist, n_samples = train_segmentation_stage(
            strong, classifier, cfg.n_p, cfg.seg_train, cfg.seed, cfg.m_max)
        report = evaluate(test, classifier, bridge, seg, cfg.tau, class_names=names)
        run = SegRun(per_class, len(strong), n_samples, report, hist, time.perf_counter() - t)
        logger.info("%d/class: mIoU %.4f (%d samples, %.0f s)", per_class, report.mean,
                    n_samples, run.seconds)
        return run

    runs = {k: seg_run(k, cls_params) for k in cfg.strong_per_class}

    ablation = ablation_acc = None
    if cfg.ablation_per_class is not None:
        strong = select_strong(pool, cfg.ablation_per_class, n_cls)
        str_params, _ = train_classifier_stage(
            stack_images(strong), stack_labels(strong), arch, cfg.cls_train, cfg.seed)
        ablation_acc = label_accuracy(predict_scores(test_images, str_params), test_labels, cfg.tau)
        ablation = seg_run(cfg.ablation_per_class, str_params)

    return ExperimentResult(acc, cls_hist, runs, ablation, ablation_acc, time.perf_counter() - t0)
