"""Command-line entry point.

Every subcommand reads a :class:`~decoseg.config.RunConfig` from
``--config FILE`` (optional) and ``--set key=value`` overrides, applied in
that order. Exit codes: 0 success, 1 usage, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .augment import StrongExample, combinatorial_crop
from .bridging import BridgeParams
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .classnet import ClassNetArch, ClassNetParams, predict_scores, train_classification
from .config import ConfigError, RunConfig, load_config
from .engine import NumericError
from .experiment import evaluate, select_strong
from .gradcheck import run_case, standard_suite
from .inference import export_masks, label_accuracy, segment_image, write_report
from .segnet import SegNetParams, fresh_models, train_segmentation
from .synth import DatasetError, gen_dataset, load_dataset, read_manifest, stack_images, stack_labels

logger = logging.getLogger("decoseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers


def _config(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if getattr(args, "data", None):
        overrides["data"] = args.data
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    return load_config(args.config, overrides)


def _write_loss_log(path: Path, history: Sequence[float]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(history, start=1):
            writer.writerow([epoch, f"{loss:.10g}"])


def _loss_log_path(args, checkpoint: str) -> Path:
    return Path(args.loss_log) if args.loss_log else Path(checkpoint).with_suffix(".loss.csv")


def _load_classifier(cfg: RunConfig) -> ClassNetParams:
    arrays = load_checkpoint(cfg.cls_checkpoint)
    try:
        return ClassNetParams.from_arrays(arrays, input_size=tuple(cfg.image_size))
    except ValueError as exc:
        raise CheckpointError(f"{cfg.cls_checkpoint}: {exc}") from exc


def _load_segmenter(cfg: RunConfig) -> tuple[BridgeParams, SegNetParams]:
    arrays = load_checkpoint(cfg.seg_checkpoint)
    try:
        return BridgeParams.from_arrays(arrays), SegNetParams.from_arrays(arrays)
    except ValueError as exc:
        raise CheckpointError(f"{cfg.seg_checkpoint}: {exc}") from exc


def _read_image(path: Path, size: tuple[int, int]) -> np.ndarray:
    try:
        with Image.open(path) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise DatasetError(f"{path}: unreadable image ({exc})") from exc
    if pixels.shape[:2] != tuple(size):
        raise DatasetError(f"{path}: image is {pixels.shape[1]}x{pixels.shape[0]}, the classifier "
                           f"expects {size[1]}x{size[0]}")
    return (pixels / 255.0).transpose(2, 0, 1)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    manifest = gen_dataset(cfg.dataset_config(), cfg.data)
    counts = {}
    for ex in manifest["examples"]:
        counts[ex["split"]] = counts.get(ex["split"], 0) + 1
    print(f"wrote {len(manifest['examples'])} examples to {cfg.data} "
          + " ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_train_cls(args) -> int:
    cfg = _config(args)
    weak = load_dataset(cfg.data, "weak")
    if not weak:
        raise DatasetError(f"{cfg.data}: the weak split is empty")
    n_cls = weak[0].labels.shape[0]
    arch = ClassNetArch(num_classes=n_cls, input_size=tuple(weak[0].image.shape[1:]))
    params = ClassNetParams.init(arch, np.random.default_rng([cfg.seed, 1]))
    t0 = time.perf_counter()
    params, history = train_classification(stack_images(weak), stack_labels(weak), params,
                                           cfg.train_config("cls"), rng_seed=cfg.seed)
    save_checkpoint(cfg.cls_checkpoint, params.arrays())
    log = _loss_log_path(args, cfg.cls_checkpoint)
    _write_loss_log(log, history)
    print(f"classifier trained on {len(weak)} images in {time.perf_counter() - t0:.1f} s, "
          f"final loss {history[-1]:.4f}")
    test = load_dataset(cfg.data, "test")
    if test:
        acc = label_accuracy(predict_scores(stack_images(test), params), stack_labels(test), cfg.tau)
        print(f"test label accuracy {acc:.4f}")
    print(f"checkpoint: {cfg.cls_checkpoint}\nloss log: {log}")
    return EXIT_OK


def cmd_train_seg(args) -> int:
    cfg = _config(args)
    cls_params = _load_classifier(cfg)
    pool = load_dataset(cfg.data, "strong")
    if not pool:
        raise DatasetError(f"{cfg.data}: the strong split is empty")
    n_cls = cls_params.arch.num_classes
    try:
        strong = select_strong(pool, cfg.strong_per_class, n_cls) if cfg.strong_per_class else pool
        examples = [StrongExample.from_annotated(e) for e in strong]
    except ValueError as exc:
        raise DatasetError(str(exc)) from exc
    samples = combinatorial_crop(examples, cfg.n_p, cfg.crop_size, rng_seed=cfg.seed, m_max=cfg.m_max)
    bridge, seg = fresh_models(cls_params.arch, np.random.default_rng([cfg.seed, 2]))
    t0 = time.perf_counter()
    bridge, seg, history = train_segmentation(samples, cls_params, bridge, seg,
                                              cfg.train_config("seg"), rng_seed=cfg.seed)
    save_checkpoint(cfg.seg_checkpoint, {**bridge.arrays(), **seg.arrays()})
    log = _loss_log_path(args, cfg.seg_checkpoint)
    _write_loss_log(log, history)
    print(f"segmentation trained on {len(samples)} crops from {len(strong)} strong images in "
          f"{time.perf_counter() - t0:.1f} s, final loss {history[-1]:.4f}")
    print(f"checkpoint: {cfg.seg_checkpoint}\nloss log: {log}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _config(args)
    cls_params = _load_classifier(cfg)
    bridge, seg = _load_segmenter(cfg)
    src = Path(args.input)
    if src.is_dir():
        paths = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not paths:
            raise DatasetError(f"{src}: no images found")
    elif src.is_file():
        paths = [src]
    else:
        raise DatasetError(f"{src} does not exist")
    results = []
    for p in paths:
        res = segment_image(_read_image(p, cls_params.arch.input_size), cls_params, bridge, seg, cfg.tau)
        results.append((p.stem, res))
        print(f"{p.name}: labels {res.labels or 'none'}")
    written = export_masks(results, args.out)
    print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    cls_params = _load_classifier(cfg)
    bridge, seg = _load_segmenter(cfg)
    examples = load_dataset(cfg.data, args.split)
    if not examples:
        raise DatasetError(f"{cfg.data}: split {args.split!r} is empty")
    if any(e.mask is None for e in examples):
        raise DatasetError(f"split {args.split!r} has no pixel annotations")
    names = read_manifest(cfg.data)["class_names"]
    report = evaluate(examples, cls_params, bridge, seg, cfg.tau,
                      include_background=not args.no_background, class_names=names)
    print(report.table())
    write_report(report, args.report)
    print(f"report: {args.report}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.seeds < 1 or args.tol <= 0:
        raise UsageError("--seeds and --tol must be positive")
    failed = 0
    for case in standard_suite():
        worst = max(run_case(case, seed) for seed in range(args.seeds))
        ok = worst < args.tol
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {case.name:<24} max rel err {worst:.2e}")
    print(f"{failed} failure(s)")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_augment_preview(args) -> int:
    cfg = _config(args)
    pool = load_dataset(cfg.data, "strong")
    if not pool:
        raise DatasetError(f"{cfg.data}: the strong split is empty")
    if args.count < 1:
        raise UsageError(f"--count must be positive, got {args.count}")
    try:
        examples = [StrongExample.from_annotated(e) for e in pool[:args.count]]
    except ValueError as exc:
        raise DatasetError(str(exc)) from exc
    samples = combinatorial_crop(examples, cfg.n_p, cfg.crop_size, rng_seed=cfg.seed, m_max=cfg.m_max)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "crops.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "source", "labels", "x0", "y0", "x1", "y1"])
        for k, s in enumerate(samples):
            stem = f"crop{k:04d}"
            pixels = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
            Image.fromarray(pixels, mode="RGB").save(out / f"{stem}.png")
            Image.fromarray(s.mask * 255, mode="L").save(out / f"{stem}_mask.png")
            writer.writerow([stem, examples[s.source].id, "+".join(map(str, s.labels)), *s.box])
    print(f"wrote {len(samples)} crops of {len(examples)} images to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="decoseg", description="Decoupled semi-supervised segmentation on numpy.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_text, config=True):
        p = sub.add_parser(name, help=help_text, description=help_text)
        if config:
            p.add_argument("--config", help="key = value config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override one config key (repeatable)")
            p.add_argument("--data", help="dataset directory (overrides the config)")
            p.add_argument("--seed", type=int, help="rng seed (overrides the config)")
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, "generate the synthetic shapes dataset")
    p = add("train-cls", cmd_train_cls, "train the classifier on the weak split")
    p.add_argument("--loss-log", help="CSV loss log (default: next to the checkpoint)")
    p = add("train-seg", cmd_train_seg, "train bridge + segmentation net with a frozen classifier")
    p.add_argument("--loss-log", help="CSV loss log (default: next to the checkpoint)")
    p = add("infer", cmd_infer, "segment an image or a directory of images")
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--out", required=True, help="output directory for masks and heatmaps")
    p = add("eval", cmd_eval, "score a split with per-class IoU")
    p.add_argument("--split", default="test", help="dataset split (default: test)")
    p.add_argument("--report", default="eval_report.json", help="JSON report path")
    p.add_argument("--no-background", action="store_true", help="leave background out of the mean")
    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every differentiable op",
            config=False)
    p.add_argument("--seeds", type=int, default=10, help="random draws per op (default: 10)")
    p.add_argument("--tol", type=float, default=1e-6, help="relative error bound (default: 1e-6)")
    p = add("augment-preview", cmd_augment_preview, "write combinatorial crops for inspection")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=2, help="strong images to expand (default: 2)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"decoseg {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"decoseg {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError, FileNotFoundError, OSError) as exc:
        print(f"decoseg {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
