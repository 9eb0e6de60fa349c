"""Run configuration: a plain ``key = value`` text file plus overrides.

Blank lines and ``#`` comments are ignored. Sizes are written ``64x64``,
optional values accept ``none``. Every key must be a field of
:class:`RunConfig`; anything else is rejected so typos cannot silently
fall back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .classnet import TrainConfig
from .experiment import DESK_CLS_TRAIN, DESK_SEG_TRAIN
from .synth import CLASS_NAMES, DatasetConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # dataset
    data: str = "data/shapes"
    num_classes: int = 4
    image_size: tuple[int, int] = (64, 64)
    n_weak: int = 500
    n_strong: int = 100
    n_test: int = 100
    shapes_min: int = 1
    shapes_max: int = 3
    noise: float = 0.05
    # inference
    tau: float = 0.5
    # stage one: classifier
    cls_lr: float = DESK_CLS_TRAIN.lr
    cls_momentum: float = DESK_CLS_TRAIN.momentum
    cls_weight_decay: float = DESK_CLS_TRAIN.weight_decay
    cls_epochs: int = DESK_CLS_TRAIN.epochs
    cls_batch_size: int = DESK_CLS_TRAIN.batch_size
    cls_max_steps: Optional[int] = DESK_CLS_TRAIN.max_steps
    cls_hflip: bool = False
    # stage two: bridge + segmentation
    seg_lr: float = DESK_SEG_TRAIN.lr
    seg_momentum: float = DESK_SEG_TRAIN.momentum
    seg_weight_decay: float = DESK_SEG_TRAIN.weight_decay
    seg_epochs: int = DESK_SEG_TRAIN.epochs
    seg_batch_size: int = DESK_SEG_TRAIN.batch_size
    seg_max_steps: Optional[int] = DESK_SEG_TRAIN.max_steps
    strong_per_class: int = 5          # 0 uses the whole strong split
    # combinatorial cropping
    n_p: int = 20
    m_max: float = 0.5
    target_size: Optional[tuple[int, int]] = None   # defaults to image_size
    # bookkeeping
    seed: int = 0
    cls_checkpoint: str = "runs/cls.ckpt"
    seg_checkpoint: str = "runs/seg.ckpt"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ["num_classes", "cls_epochs", "cls_batch_size", "seg_epochs", "seg_batch_size",
                    "shapes_min", "shapes_max"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        nonneg = ["n_weak", "n_strong", "n_test", "noise", "cls_lr", "cls_weight_decay", "seg_lr",
                  "seg_weight_decay", "strong_per_class", "n_p", "m_max", "seed"]
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ConfigError(f"num_classes must be in [1, {len(CLASS_NAMES)}], got {self.num_classes}")
        if self.shapes_min > self.shapes_max:
            raise ConfigError(f"shapes_min {self.shapes_min} exceeds shapes_max {self.shapes_max}")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        for name in ("cls_momentum", "seg_momentum"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        for name in ("cls_max_steps", "seg_max_steps"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be positive or none, got {v}")
        for name in ("image_size", "target_size"):
            v = getattr(self, name)
            if v is not None and (len(v) != 2 or min(v) < 1):
                raise ConfigError(f"{name} must be two positive integers, got {v}")
        if self.target_size is not None and tuple(self.target_size) != tuple(self.image_size):
            raise ConfigError(f"target_size {self.target_size} must equal the network input "
                              f"size {self.image_size}")

    # -- derived views ---------------------------------------------------

    def dataset_config(self) -> DatasetConfig:
        try:
            return DatasetConfig(num_classes=self.num_classes, image_size=tuple(self.image_size),
                                 n_weak=self.n_weak, n_strong=self.n_strong, n_test=self.n_test,
                                 shapes_per_image=(self.shapes_min, self.shapes_max),
                                 noise=self.noise, seed=self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self, stage: str) -> TrainConfig:
        if stage not in ("cls", "seg"):
            raise ValueError(f"unknown stage {stage!r}")
        get = lambda k: getattr(self, f"{stage}_{k}")  # noqa: E731
        return TrainConfig(lr=get("lr"), momentum=get("momentum"), weight_decay=get("weight_decay"),
                           epochs=get("epochs"), batch_size=get("batch_size"),
                           max_steps=get("max_steps"),
                           hflip=self.cls_hflip if stage == "cls" else False)

    @property
    def crop_size(self) -> tuple[int, int]:
        return tuple(self.target_size or self.image_size)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return "x".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _convert(key: str, text: str):
    ftype = str(FIELDS[key].type)
    text = text.strip()
    optional = ftype.startswith("Optional")
    if optional and text.lower() in ("none", ""):
        return None
    try:
        if "tuple" in ftype:
            parts = text.lower().replace(",", "x").split("x")
            return tuple(int(p) for p in parts if p.strip())
        if "bool" in ftype:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if "int" in ftype:
            return int(text)
        if "float" in ftype:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {ftype}") from None
    return text


def parse_assignments(lines: Iterable[str], source: str = "<config>") -> dict[str, object]:
    """Parse ``key = value`` lines into typed values."""
    out: dict[str, object] = {}
    for no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FIELDS:
            raise ConfigError(f"{source}:{no}: unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


def load_config(path=None, overrides: Optional[Mapping[str, object]] = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (already typed or strings)."""
    values: dict[str, object] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        values.update(parse_assignments(p.read_text(encoding="utf-8").splitlines(), str(p)))
    for key, value in (overrides or {}).items():
        key = key.replace("-", "_")
        if key not in FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _convert(key, value) if isinstance(value, str) else value
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
