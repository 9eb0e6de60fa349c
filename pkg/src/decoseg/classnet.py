"""Multi-label classification network.

A stack of conv/relu/max-pool blocks followed by a fully-connected head.
Scores are pre-sigmoid logits. The forward pass keeps every activation and
every pooling switch map so the bridging layers and the segmentation
network can reuse them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import ops
from .engine import Graph, Tensor
from .ops import SwitchMap
from .optim import SGD

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassNetArch:
    num_classes: int = 4
    in_channels: int = 3
    input_size: tuple[int, int] = (64, 64)
    widths: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    hidden: tuple[int, ...] = (128,)
    pool: int = 2

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")
        if not self.widths:
            raise ValueError("at least one conv block is required")
        if self.kernel % 2 != 1:
            raise ValueError(f"kernel must be odd for same-size padding, got {self.kernel}")
        step = self.pool ** len(self.widths)
        for dim in self.input_size:
            if dim % step:
                raise ValueError(
                    f"input size {self.input_size} is not divisible by {step} "
                    f"({len(self.widths)} pools of {self.pool})")

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        """Shape (c, h, w) of the last pooling layer's output."""
        step = self.pool ** len(self.widths)
        return (self.widths[-1], self.input_size[0] // step, self.input_size[1] // step)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        c_in = self.in_channels
        for i, c_out in enumerate(self.widths, start=1):
            shapes[f"cls.block{i}.conv.weight"] = (c_out, c_in, self.kernel, self.kernel)
            shapes[f"cls.block{i}.conv.bias"] = (c_out,)
            c_in = c_out
        n_in = int(np.prod(self.feature_shape))
        for j, n_out in enumerate((*self.hidden, self.num_classes), start=1):
            shapes[f"cls.fc{j}.weight"] = (n_out, n_in)
            shapes[f"cls.fc{j}.bias"] = (n_out,)
            n_in = n_out
        return shapes


def glorot_uniform(shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)); 4-D shapes count the kernel area."""
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_out, fan_in = shape[0] * receptive, shape[1] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ParamSet:
    """Named parameter tensors with a ``prefix.`` naming scheme."""

    prefix = ""

    def __init__(self, tensors: Mapping[str, Tensor]):
        self.tensors: dict[str, Tensor] = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> dict[str, Tensor]:
        return self.tensors

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def requires_grad_(self, flag: bool = True):
        for t in self.tensors.values():
            t.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}


class ClassNetParams(ParamSet):
    prefix = "cls"

    def __init__(self, arch: ClassNetArch, tensors: Mapping[str, Tensor]):
        expected = arch.param_shapes()
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ValueError(f"classifier parameters mismatch: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ValueError(f"{name} has shape {tensors[name].shape}, expected {shape}")
        super().__init__({k: tensors[k] for k in expected})
        self.arch = arch

    @classmethod
    def init(cls, arch: ClassNetArch, rng: np.random.Generator) -> "ClassNetParams":
        tensors = {}
        for name, shape in arch.param_shapes().items():
            data = glorot_uniform(shape, rng) if name.endswith("weight") else np.zeros(shape)
            tensors[name] = Tensor(data, name=name)
        return cls(arch, tensors)

    @classmethod
    def zeros(cls, arch: ClassNetArch) -> "ClassNetParams":
        return cls(arch, {n: Tensor(np.zeros(s), name=n) for n, s in arch.param_shapes().items()})

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray],
                    input_size: Optional[tuple[int, int]] = None,
                    pool: int = 2) -> "ClassNetParams":
        """Rebuild the architecture from tensor names and shapes."""
        widths, hidden = [], []
        i = 1
        in_channels = kernel = None
        while f"cls.block{i}.conv.weight" in arrays:
            w = arrays[f"cls.block{i}.conv.weight"]
            if in_channels is None:
                in_channels, kernel = w.shape[1], w.shape[2]
            widths.append(w.shape[0])
            i += 1
        j = 1
        fc_shapes = []
        while f"cls.fc{j}.weight" in arrays:
            fc_shapes.append(arrays[f"cls.fc{j}.weight"].shape)
            j += 1
        if not widths or not fc_shapes:
            raise ValueError("arrays do not describe a classifier (no cls.block1/cls.fc1)")
        hidden = [s[0] for s in fc_shapes[:-1]]
        if input_size is None:
            cells = fc_shapes[0][1] // widths[-1]
            side = int(round(np.sqrt(cells)))
            if side * side * widths[-1] != fc_shapes[0][1]:
                raise ValueError("cannot infer a square input size; pass input_size")
            step = pool ** len(widths)
            input_size = (side * step, side * step)
        arch = ClassNetArch(
            num_classes=fc_shapes[-1][0], in_channels=in_channels, input_size=tuple(input_size),
            widths=tuple(widths), kernel=kernel, hidden=tuple(hidden), pool=pool)
        return cls(arch, {k: Tensor(np.array(v, dtype=np.float64), name=k)
                          for k, v in arrays.items() if k.startswith("cls.")})

    def detached(self) -> "ClassNetParams":
        return ClassNetParams(self.arch, {k: t.detach() for k, t in self.tensors.items()})


@dataclass
class FeatureCache:
    """Everything one forward pass produced.

    ``activations`` follows layer order (conv, relu, pool per block, then
    flatten, fc, relu ..., final fc). ``pool_index`` points at the last
    pooling output, ``hidden_index`` at the post-relu hidden activations.
    """

    activations: list[Tensor]
    layer_names: list[str]
    switches: list[SwitchMap]
    pool_index: int
    hidden_index: list[int] = field(default_factory=list)

    @property
    def pool_features(self) -> Tensor:
        return self.activations[self.pool_index]

    @property
    def scores(self) -> Tensor:
        return self.activations[-1]

    @property
    def batch_size(self) -> int:
        return self.activations[0].shape[0]

    def take(self, batch_index) -> "FeatureCache":
        """Sub-select (or repeat) batch entries; results are untracked."""
        idx = np.asarray(batch_index)
        return FeatureCache(
            [Tensor(a.data[idx]) for a in self.activations], list(self.layer_names),
            [s.take(idx) for s in self.switches], self.pool_index, list(self.hidden_index))


def head_forward(features: Tensor, params: ClassNetParams,
                 relu_masks: Optional[Sequence[np.ndarray]] = None,
                 record: Optional[list] = None) -> Tensor:
    """Fully-connected head from last-pool features to class logits.

    With ``relu_masks`` every relu is replaced by a gate that reuses a given
    activation pattern.
    """
    h = ops.flatten(features)
    if record is not None:
        record.append(("flatten", h))
    n_fc = len(params.arch.hidden) + 1
    for j in range(1, n_fc + 1):
        h = ops.fully_connected(h, params[f"cls.fc{j}.weight"], params[f"cls.fc{j}.bias"])
        if record is not None:
            record.append((f"fc{j}", h))
        if j < n_fc:
            h = ops.relu(h) if relu_masks is None else ops.gate(h, relu_masks[j - 1])
            if record is not None:
                record.append((f"fc{j}.relu", h))
    return h


def cls_forward(image, params: ClassNetParams) -> tuple[Tensor, FeatureCache]:
    """Score a batch of images (b x c x h x w); returns b x L logits and the cache."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    arch = params.arch
    if x.ndim == 3:
        x = Tensor(x.data[None]) if not x.requires_grad else ops.reshape(x, (1, *x.shape))
    expected = (arch.in_channels, *arch.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"classifier expects images of shape (b, {expected}), got {x.shape}")

    acts: list[Tensor] = []
    names: list[str] = []
    switches: list[SwitchMap] = []
    pad = arch.kernel // 2
    h = x
    for i in range(1, len(arch.widths) + 1):
        h = ops.conv2d(h, params[f"cls.block{i}.conv.weight"], params[f"cls.block{i}.conv.bias"],
                       stride=1, pad=pad)
        acts.append(h)
        names.append(f"block{i}.conv")
        h = ops.relu(h)
        acts.append(h)
        names.append(f"block{i}.relu")
        h, sw = ops.maxpool2d(h, arch.pool)
        acts.append(h)
        names.append(f"block{i}.pool")
        switches.append(sw)
    pool_index = len(acts) - 1

    record: list = []
    scores = head_forward(h, params, record=record)
    hidden_index = []
    for name, t in record:
        acts.append(t)
        names.append(name)
        if name.endswith(".relu"):
            hidden_index.append(len(acts) - 1)
    return scores, FeatureCache(acts, names, switches, pool_index, hidden_index)


def cls_loss(scores: Tensor, labels) -> Tensor:
    return ops.sigmoid_cross_entropy(scores, labels)


def identify_labels(scores, tau: float = 0.5) -> list[int]:
    """Classes whose sigmoid score reaches ``tau``, ascending."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {tau}")
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    s = s.reshape(-1)
    # sigma(s) >= tau  <=>  s >= logit(tau); compare probabilities to keep the
    # boundary case identical to the definition
    prob = ops._sigmoid(s)
    return [int(l) for l in np.flatnonzero(prob >= tau)]


@dataclass
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 16
    max_steps: Optional[int] = None
    hflip: bool = False

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be nonnegative, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError(f"max_steps must be positive, got {self.max_steps}")


def iterate_minibatches(n: int, cfg: TrainConfig, rng: np.random.Generator) -> Iterable[tuple[int, np.ndarray]]:
    """Yield (epoch, indices) until the epoch or step budget runs out."""
    steps = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                return
            yield epoch, order[start:start + cfg.batch_size]
            steps += 1


def train_classification(images: np.ndarray, labels: np.ndarray, params: ClassNetParams,
                         cfg: TrainConfig, rng_seed: int) -> tuple[ClassNetParams, list[float]]:
    """Fit the classifier in place on weakly labelled images.

    ``images`` is n x c x h x w in [0, 1], ``labels`` n x L in {0, 1}.
    Returns the params and the mean loss of every epoch.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("cannot train the classifier on an empty dataset")
    if labels.shape != (len(images), params.arch.num_classes):
        raise ValueError(f"labels shape {labels.shape} does not match "
                         f"({len(images)}, {params.arch.num_classes})")
    rng = np.random.default_rng(rng_seed)
    params.requires_grad_(True)
    opt = SGD(params.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    history: list[float] = []
    sums: dict[int, list[float]] = {}
    for epoch, idx in iterate_minibatches(len(images), cfg, rng):
        batch = images[idx]
        if cfg.hflip:
            flip = rng.random(len(idx)) < 0.5
            batch = np.where(flip[:, None, None, None], batch[..., ::-1], batch)
        params.zero_grad()
        with Graph() as g:
            scores, _ = cls_forward(batch, params)
            loss = cls_loss(scores, labels[idx])
            g.backward(loss)
        if cfg.lr > 0:
            opt.step()
        sums.setdefault(epoch, []).append(loss.item())
    params.requires_grad_(False)
    params.zero_grad()
    for epoch in sorted(sums):
        history.append(float(np.mean(sums[epoch])))
        logger.debug("cls epoch %d loss %.5f", epoch, history[-1])
    return params, history


def predict_scores(images: np.ndarray, params: ClassNetParams, batch_size: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        scores, _ = cls_forward(np.asarray(images[start:start + batch_size], dtype=np.float64), params)
        out.append(scores.data)
    return np.concatenate(out, axis=0)
