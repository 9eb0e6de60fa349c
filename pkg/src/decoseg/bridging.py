"""Bridging layers: from classifier features to class-specific activation maps.

For class ``l`` the saliency is the derivative of logit ``S_l`` with
respect to the last pooling activation, taken with the forward relu
pattern. It is concatenated with the pooled features themselves and mixed
per location by two 1x1 convolution + relu layers.
"""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from . import ops
from .classnet import ClassNetParams, FeatureCache, ParamSet, glorot_uniform, head_forward
from .engine import Graph, Tensor


class BridgeParams(ParamSet):
    prefix = "bridge"

    def __init__(self, channels: int, tensors: Mapping[str, Tensor]):
        expected = self.param_shapes(channels)
        for name, shape in expected.items():
            if name not in tensors:
                raise ValueError(f"missing bridge parameter {name}")
            if tensors[name].shape != shape:
                raise ValueError(f"{name} has shape {tensors[name].shape}, expected {shape}")
        super().__init__({k: tensors[k] for k in expected})
        self.channels = channels

    @staticmethod
    def param_shapes(channels: int) -> dict[str, tuple[int, ...]]:
        c = channels
        return {
            "bridge.mix1.weight": (c, 2 * c, 1, 1),
            "bridge.mix1.bias": (c,),
            "bridge.mix2.weight": (c, c, 1, 1),
            "bridge.mix2.bias": (c,),
        }

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator) -> "BridgeParams":
        tensors = {}
        for name, shape in cls.param_shapes(channels).items():
            data = glorot_uniform(shape, rng) if name.endswith("weight") else np.zeros(shape)
            tensors[name] = Tensor(data, name=name)
        return cls(channels, tensors)

    @classmethod
    def zeros(cls, channels: int) -> "BridgeParams":
        return cls(channels, {n: Tensor(np.zeros(s), name=n)
                              for n, s in cls.param_shapes(channels).items()})

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "BridgeParams":
        if "bridge.mix2.weight" not in arrays:
            raise ValueError("arrays contain no bridge parameters")
        channels = arrays["bridge.mix2.weight"].shape[0]
        return cls(channels, {k: Tensor(np.array(v, dtype=np.float64), name=k)
                              for k, v in arrays.items() if k.startswith("bridge.")})


def spatial_features(cache: FeatureCache) -> Tensor:
    """The last pooling activation, as stored."""
    return cache.activations[cache.pool_index]


def all_class_saliencies(params: ClassNetParams, cache: FeatureCache) -> np.ndarray:
    """Saliency of every class at once, shape b x L x c x h x w.

    The batch is replicated once per class and a single backward pass is
    seeded with the identity at the score layer.
    """
    feats = spatial_features(cache).data
    b = feats.shape[0]
    n_cls = params.arch.num_classes
    frozen = params.detached()
    masks = [np.repeat(cache.activations[i].data > 0, n_cls, axis=0) for i in cache.hidden_index]
    leaf = Tensor(np.repeat(feats, n_cls, axis=0), requires_grad=True)
    with Graph() as g:
        scores = head_forward(leaf, frozen, relu_masks=masks)
        g.backward(scores, seed=np.tile(np.eye(n_cls), (b, 1)))
    return leaf.grad.reshape(b, n_cls, *feats.shape[1:])


def class_saliency(params: ClassNetParams, cache: FeatureCache, label: int) -> Tensor:
    """d S_label / d (last-pool activation), b x c x h x w."""
    n_cls = params.arch.num_classes
    if not 0 <= int(label) < n_cls:
        raise IndexError(f"class index {label} out of range [0, {n_cls})")
    return Tensor(all_class_saliencies(params, cache)[:, int(label)].copy())


def combine_saliencies(per_class: np.ndarray, labels: Iterable[int]) -> np.ndarray:
    """Sum per-class saliencies (b x L x ...) over ``labels`` in ascending order."""
    labels = sorted(set(int(l) for l in labels))
    if not labels:
        raise ValueError("combined saliency needs a nonempty label set")
    n_cls = per_class.shape[1]
    for l in labels:
        if not 0 <= l < n_cls:
            raise IndexError(f"class index {l} out of range [0, {n_cls})")
    out = per_class[:, labels[0]].copy()
    for l in labels[1:]:
        out += per_class[:, l]
    return out


def combined_saliency(params: ClassNetParams, cache: FeatureCache, labels: Iterable[int]) -> Tensor:
    """d (sum of S_l over ``labels``) / d (last-pool activation)."""
    labels = list(labels)
    if not labels:
        raise ValueError("combined saliency needs a nonempty label set")
    return Tensor(combine_saliencies(all_class_saliencies(params, cache), labels))


def bridge_forward(spat, sal, params: BridgeParams) -> Tensor:
    """Mix concatenated (features, saliency) into a class-specific activation map."""
    spat = spat if isinstance(spat, Tensor) else Tensor(spat)
    sal = sal if isinstance(sal, Tensor) else Tensor(sal)
    if spat.shape != sal.shape:
        raise ValueError(f"spatial features {spat.shape} and saliency {sal.shape} differ in shape")
    if spat.ndim != 4 or spat.shape[1] != params.channels:
        raise ValueError(
            f"bridge expects {params.channels} feature channels, got shape {spat.shape}")
    x = ops.concat_channels(spat, sal)
    x = ops.relu(ops.conv2d(x, params["bridge.mix1.weight"], params["bridge.mix1.bias"]))
    return ops.relu(ops.conv2d(x, params["bridge.mix2.weight"], params["bridge.mix2.bias"]))
