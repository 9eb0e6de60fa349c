"""Decoupled semi-supervised semantic segmentation on a small numpy autodiff engine.

A classifier trained on image-level labels supplies class-specific
saliency; bridging layers turn it into activation maps that a mirrored
unpool/deconv network segments as figure and ground. Only the bridge and
the segmentation network see pixel annotations.
"""

from .augment import CropSample, StrongExample, combinatorial_crop, powerset_nonempty
from .bridging import BridgeParams, bridge_forward, class_saliency, combined_saliency
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .classnet import ClassNetArch, ClassNetParams, TrainConfig, cls_forward, identify_labels, train_classification
from .engine import Graph, NumericError, Tensor
from .inference import IouReport, mean_iou, merge_label_maps, segment_image
from .segnet import SegNetArch, SegNetParams, seg_forward, train_segmentation
from .synth import BACKGROUND, DatasetConfig, DatasetError, gen_dataset, load_dataset

__version__ = "0.1.0"

__all__ = [
    "BACKGROUND", "BridgeParams", "CheckpointError", "ClassNetArch", "ClassNetParams", "CropSample",
    "DatasetConfig", "DatasetError", "Graph", "IouReport", "NumericError", "SegNetArch",
    "SegNetParams", "StrongExample", "Tensor", "TrainConfig", "bridge_forward", "class_saliency",
    "cls_forward", "combinatorial_crop", "combined_saliency", "gen_dataset", "identify_labels",
    "load_checkpoint", "load_dataset", "mean_iou", "merge_label_maps", "powerset_nonempty",
    "save_checkpoint", "seg_forward", "segment_image", "train_classification", "train_segmentation",
]
