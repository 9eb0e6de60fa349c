"""Figure/ground segmentation network driven by the classifier's switches.

The network mirrors the classifier's conv/pool blocks in reverse: every
stage unpools with the switches of the matching pooling layer, then
applies a same-size transposed convolution and a relu. A final 1x1
transposed convolution produces foreground (channel 0) and background
(channel 1) logits.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import ops
from .bridging import BridgeParams, all_class_saliencies, bridge_forward, combine_saliencies, spatial_features
from .classnet import (ClassNetArch, ClassNetParams, ParamSet, TrainConfig, cls_forward,
                       glorot_uniform, iterate_minibatches)
from .engine import Graph, Tensor
from .ops import SwitchMap
from .optim import SGD

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegNetArch:
    in_channels: int = 64
    stage_widths: tuple[int, ...] = (32, 16, 16)
    kernel: int = 3
    out_channels: int = 2

    @classmethod
    def mirror(cls, arch: ClassNetArch) -> "SegNetArch":
        """Reverse the classifier's channel taper: (16, 32, 64) -> 64 -> 32, 16, 16."""
        w = arch.widths
        stage_widths = tuple(reversed(w[:-1])) + (w[0],)
        return cls(in_channels=w[-1], stage_widths=stage_widths, kernel=arch.kernel)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        c_in = self.in_channels
        for i, c_out in enumerate(self.stage_widths, start=1):
            shapes[f"seg.stage{i}.deconv.weight"] = (c_in, c_out, self.kernel, self.kernel)
            shapes[f"seg.stage{i}.deconv.bias"] = (c_out,)
            c_in = c_out
        shapes["seg.out.weight"] = (c_in, self.out_channels, 1, 1)
        shapes["seg.out.bias"] = (self.out_channels,)
        return shapes


class SegNetParams(ParamSet):
    prefix = "seg"

    def __init__(self, arch: SegNetArch, tensors: Mapping[str, Tensor]):
        expected = arch.param_shapes()
        for name, shape in expected.items():
            if name not in tensors:
                raise ValueError(f"missing segmentation parameter {name}")
            if tensors[name].shape != shape:
                raise ValueError(f"{name} has shape {tensors[name].shape}, expected {shape}")
        super().__init__({k: tensors[k] for k in expected})
        self.arch = arch

    @classmethod
    def init(cls, arch: SegNetArch, rng: np.random.Generator) -> "SegNetParams":
        tensors = {}
        for name, shape in arch.param_shapes().items():
            data = glorot_uniform(shape, rng) if name.endswith("weight") else np.zeros(shape)
            tensors[name] = Tensor(data, name=name)
        return cls(arch, tensors)

    @classmethod
    def zeros(cls, arch: SegNetArch) -> "SegNetParams":
        return cls(arch, {n: Tensor(np.zeros(s), name=n) for n, s in arch.param_shapes().items()})

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "SegNetParams":
        widths = []
        i = 1
        in_channels = kernel = None
        while f"seg.stage{i}.deconv.weight" in arrays:
            w = arrays[f"seg.stage{i}.deconv.weight"]
            if in_channels is None:
                in_channels, kernel = w.shape[0], w.shape[2]
            widths.append(w.shape[1])
            i += 1
        if not widths or "seg.out.weight" not in arrays:
            raise ValueError("arrays do not describe a segmentation network")
        arch = SegNetArch(in_channels, tuple(widths), kernel, arrays["seg.out.weight"].shape[1])
        return cls(arch, {k: Tensor(np.array(v, dtype=np.float64), name=k)
                          for k, v in arrays.items() if k.startswith("seg.")})


def seg_forward(g, switches: Sequence[SwitchMap], params: SegNetParams) -> tuple[Tensor, Tensor]:
    """Return (probabilities, logits), both b x 2 x H x W."""
    g = g if isinstance(g, Tensor) else Tensor(g)
    arch = params.arch
    if len(switches) != len(arch.stage_widths):
        raise ValueError(
            f"segmentation net has {len(arch.stage_widths)} unpool stages but got "
            f"{len(switches)} switch maps")
    if g.ndim != 4 or g.shape[1] != arch.in_channels:
        raise ValueError(f"activation map must be b x {arch.in_channels} x h x w, got {g.shape}")
    pad = arch.kernel // 2
    h = g
    for i, sw in enumerate(reversed(switches), start=1):
        if sw.shape != h.shape:
            raise ValueError(
                f"stage {i}: switch map shape {sw.shape} does not match activation {h.shape}")
        h = ops.unpool2d(h, sw, *sw.input_hw)
        h = ops.deconv2d(h, params[f"seg.stage{i}.deconv.weight"],
                         params[f"seg.stage{i}.deconv.bias"], stride=1, pad=pad)
        h = ops.relu(h)
    logits = ops.deconv2d(h, params["seg.out.weight"], params["seg.out.bias"])
    return ops.softmax_channels(logits), logits


def seg_loss(logits: Tensor, mask) -> Tensor:
    return ops.pixelwise_softmax_loss(logits, mask)


def activation_maps(cls_params: ClassNetParams, bridge: BridgeParams, images: np.ndarray,
                    label_sets: Sequence[Sequence[int]]):
    """Classifier pass plus saliency for a batch; one label set per image.

    Returns (spatial features, combined saliency, switches), all untracked.
    """
    _, cache = cls_forward(images, cls_params)
    per_class = all_class_saliencies(cls_params, cache)
    sal = np.stack([combine_saliencies(per_class[i:i + 1], p)[0]
                    for i, p in enumerate(label_sets)])
    return spatial_features(cache).data, sal, cache.switches


def train_segmentation(samples: Sequence, cls_params: ClassNetParams, bridge: BridgeParams,
                       seg: SegNetParams, cfg: TrainConfig, rng_seed: int,
                       ) -> tuple[BridgeParams, SegNetParams, list[float]]:
    """Jointly fit bridge and segmentation params on strong samples.

    Each sample needs ``image`` (c x h x w), ``mask`` (binary h x w) and
    ``labels`` (the label combination that defines the mask). The
    classifier is only read. Returns updated params and per-epoch mean loss.
    """
    if len(samples) == 0:
        raise ValueError("cannot train the segmentation network on an empty strong set")
    for s in samples:
        if not len(s.labels):
            raise ValueError("every strong sample needs a nonempty label combination")
    rng = np.random.default_rng(rng_seed)
    frozen = cls_params.detached()
    trainable = {**bridge.parameters(), **seg.parameters()}
    for t in trainable.values():
        t.requires_grad = True
    opt = SGD(trainable, cfg.lr, cfg.momentum, cfg.weight_decay)
    sums: dict[int, list[float]] = {}

    for epoch, idx in iterate_minibatches(len(samples), cfg, rng):
        batch = [samples[i] for i in idx]
        images = np.stack([s.image for s in batch]).astype(np.float64)
        masks = np.stack([s.mask for s in batch]).astype(np.float64)
        spat, sal, switches = activation_maps(frozen, bridge, images, [s.labels for s in batch])
        for t in trainable.values():
            t.grad = None
        with Graph() as g:
            act = bridge_forward(Tensor(spat), Tensor(sal), bridge)
            _, logits = seg_forward(act, switches, seg)
            loss = seg_loss(logits, masks)
            g.backward(loss)
        if cfg.lr > 0:
            opt.step()
        sums.setdefault(epoch, []).append(loss.item())

    for t in trainable.values():
        t.requires_grad = False
        t.grad = None
    history = [float(np.mean(sums[e])) for e in sorted(sums)]
    return bridge, seg, history


def fresh_models(cls_arch: ClassNetArch, rng: np.random.Generator,
                 seg_arch: Optional[SegNetArch] = None) -> tuple[BridgeParams, SegNetParams]:
    seg_arch = seg_arch or SegNetArch.mirror(cls_arch)
    bridge = BridgeParams.init(cls_arch.feature_shape[0], rng)
    return bridge, SegNetParams.init(seg_arch, rng)
