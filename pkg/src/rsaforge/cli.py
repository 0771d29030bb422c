"""Command-line interface: ``rsaforge {train,extract,rdm,score,evaluate,report}``.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .model import TAP_NAMES, ArchConfig, build
from .tensor import IMAGENET_MEAN, IMAGENET_STD, load_archive, save_archive
from .train import (LEARNING_RATE, MAX_EPOCHS, MOMENTUM, WEIGHT_DECAY, LabeledDataset,
                    TrainConfig, gen_synthetic, train)

log = logging.getLogger("rsaforge")


class UsageError(Exception):
    pass


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def _nonneg_float(text: str) -> float:
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return value


def _momentum(text: str) -> float:
    value = float(text)
    if not 0 <= value < 1:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1), got {text}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def _triple(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    return tuple(parts)


def _size(text: str) -> tuple[int, int]:
    parts = [int(p) for p in text.lower().replace("x", ",").split(",")]
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected SIZE or HxW, got {text!r}")
    return tuple(parts)


def _synthetic(text: str) -> dict:
    spec = {"classes": 4, "per_class": 50, "size": 64, "seed": None}
    for item in filter(None, text.split(",")):
        key, sep, value = item.partition("=")
        if not sep or key not in spec:
            raise argparse.ArgumentTypeError(
                f"bad synthetic spec item {item!r}; keys are {', '.join(spec)}")
        spec[key] = int(value)
    if spec["classes"] < 2 or spec["per_class"] < 1 or spec["size"] < 8:
        raise argparse.ArgumentTypeError(f"invalid synthetic spec {text!r}")
    return spec


def _taps(text: str) -> list[str]:
    taps = [t for t in text.split(",") if t]
    unknown = [t for t in taps if t not in TAP_NAMES]
    if unknown or not taps:
        raise argparse.ArgumentTypeError(
            f"unknown tap(s) {unknown}; valid taps are {', '.join(TAP_NAMES)}")
    return taps


def _add_preprocess(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input-size", type=_size, default=(64, 64), help="resize target, N or HxW")
    p.add_argument("--mean", type=_triple, default=IMAGENET_MEAN)
    p.add_argument("--std", type=_triple, default=IMAGENET_STD)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsaforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a ResNet on synthetic or archived images")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", type=_synthetic, metavar="classes=4,per_class=50[,size=64,seed=S]")
    src.add_argument("--data", type=Path, help="RDMA archive with 'images' [M,3,H,W] and 'labels' [M]")
    p.add_argument("--arch", choices=("resnet20", "resnet18"), default="resnet20")
    p.add_argument("--num-classes", type=_positive_int, help="default: dataset class count")
    p.add_argument("--epochs", type=_nonneg_int, default=MAX_EPOCHS)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--lr", type=_positive_float, default=LEARNING_RATE)
    p.add_argument("--momentum", type=_momentum, default=MOMENTUM)
    p.add_argument("--weight-decay", type=_nonneg_float, default=WEIGHT_DECAY)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("runs/train"))
    _add_preprocess(p)

    p = sub.add_parser("extract", help="dump per-layer activations for a stimulus set")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True, help="directory of .ppm files or RDMA archive")
    p.add_argument("--taps", type=_taps, default=list(TAP_NAMES))
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--out", type=Path, required=True)
    _add_preprocess(p)

    p = sub.add_parser("rdm", help="build one RDM per layer from an activation archive")
    p.add_argument("--activations", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output directory for <layer>.rdmt")

    p = sub.add_parser("score", help="score model RDMs against brain RDMs")
    p.add_argument("--model-rdms", type=Path, required=True, help="directory of <layer>.rdmt files")
    p.add_argument("--brain", type=Path, required=True, help="RDMA archive, one [S,n,n] per region")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", help="extract, build RDMs and score for every stimulus set")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, help="override the manifest's checkpoint")
    p.add_argument("--label", help="override the manifest's model label")
    p.add_argument("--output-dir", type=Path, help="override the manifest's output directory")
    p.add_argument("--ledger", type=Path, help="override the manifest's results ledger")

    p = sub.add_parser("report", help="render the results ledger as a leaderboard")
    p.add_argument("--ledger", type=Path, required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", type=Path, help="default: standard output")
    return parser


# --------------------------------------------------------------------------- commands


def cmd_train(args) -> int:
    try:
        config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                             momentum=args.momentum, weight_decay=args.weight_decay, seed=args.seed,
                             mean=args.mean, std=args.std, resize=args.input_size)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.synthetic is not None:
        s = args.synthetic
        seed = args.seed if s["seed"] is None else s["seed"]
        dataset = gen_synthetic(s["classes"], s["per_class"], (s["size"], s["size"]), seed)
    else:
        tensors = load_archive(args.data)
        if "images" not in tensors or "labels" not in tensors:
            raise ValueError(f"{args.data}: archive needs 'images' and 'labels' tensors")
        labels = tensors["labels"].astype(np.int64).ravel()
        dataset = LabeledDataset(tensors["images"], labels, int(labels.max()) + 1)
    num_classes = args.num_classes or dataset.class_count
    blocks = (3, 2, 2, 2) if args.arch == "resnet20" else (2, 2, 2, 2)
    model = build(ArchConfig(blocks, input_size=args.input_size, num_classes=num_classes), args.seed)
    result = train(model, dataset, config, args.out)
    for rec in result.log:
        log.info("epoch %d loss %.4f accuracy %.3f", rec["epoch"], rec["mean_loss"], rec["accuracy"])
    print(f"trained {config.epochs} epoch(s); checkpoints at {sorted(result.checkpoints)} in {args.out}")
    return 0


def cmd_extract(args) -> int:
    model, _ = pipeline.load_model(args.checkpoint)
    images = pipeline.load_images(args.images)
    acts = pipeline.extract_activations(model, images, args.taps, args.input_size, args.mean,
                                        args.std, args.batch_size)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_archive(args.out, acts)
    print(f"wrote {len(acts)} activation tensor(s) for {len(images)} stimuli to {args.out}")
    return 0


def cmd_rdm(args) -> int:
    acts = pipeline.activations_archive(args.activations)
    rdms = pipeline.rdms_from_activations(acts)
    pipeline.write_rdms(rdms, args.out)
    print(f"wrote {len(rdms)} RDM(s) to {args.out}")
    return 0


def cmd_score(args) -> int:
    report = pipeline.score_report(pipeline.read_rdms(args.model_rdms),
                                   pipeline.read_brain(args.brain), pipeline.worker_count())
    args.out.parent.mkdir(parents=True, exist_ok=True)
    pipeline.write_json(args.out, report)
    print(f"best layer: {report['best_layer']}")
    return 0


def cmd_evaluate(args) -> int:
    manifest = pipeline.EvalManifest.load(args.manifest)
    if args.checkpoint:
        manifest.checkpoint = args.checkpoint
    if args.label:
        manifest.label = args.label
    if args.output_dir:
        manifest.output_dir = args.output_dir
    if args.ledger:
        manifest.ledger = args.ledger
    try:
        manifest.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    summary = pipeline.evaluate(manifest, pipeline.worker_count())
    row = summary["leaderboard_row"]
    print(f"{row['model']} epoch {row['epoch']}: best layer {row['best_layer']}, "
          f"mean {row['mean_pct']:.3f}% (EVC {row['evc_pct']}, IT {row['it_pct']})")
    return 0


def cmd_report(args) -> int:
    text = pipeline.render_report(pipeline.read_ledger(args.ledger), args.format)
    if args.out is None:
        sys.stdout.write(text)
    else:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    return 0


COMMANDS = {
    "train": cmd_train,
    "extract": cmd_extract,
    "rdm": cmd_rdm,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 2 on usage errors, 0 for --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rsaforge {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"rsaforge {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
