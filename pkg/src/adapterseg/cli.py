"""Command-line entry point: train, eval, report, hfc-dump and synth."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml
from PIL import Image

from .checkpoint import CheckpointError
from .data import DATASET_PRESETS, DataError, cached_manifest, load_image
from .guidance import extract_hfc
from .metrics import evaluate_dataset
from .report import render_reports
from .synthetic import write_toy_dataset
from .trainer import (Checkpoint, ConfigError, MaskPassthrough, NumericAbort, Predictor, TrainConfig,
                      model_from_config, resume, train)

log = logging.getLogger("adapterseg")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5
TASKS = ("cod", "shadow", "polyp", "cell")


class UsageError(Exception):
    """Argument combination that cannot run; mapped to the config exit code."""


def parse_overrides(pairs: Sequence[str]) -> dict:
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {pair!r} is not key=value")
        out[key] = yaml.safe_load(value)
    return out


def dataset_manifest(root, task: str, dataset_id: Optional[str] = None, layout: Optional[str] = None,
                     split_rule: Optional[str] = None):
    root = Path(root)
    dataset_id = dataset_id or root.name
    kwargs = dict(DATASET_PRESETS.get(dataset_id.lower(), {}))
    if layout:
        kwargs["layout"] = layout
    if split_rule:
        kwargs["split_rule"] = split_rule
    return cached_manifest(root, dataset_id=dataset_id, task=task, **kwargs)


def to_gray8(values: np.ndarray) -> np.ndarray:
    """Min-max rescale to uint8; a constant map becomes mid-gray."""
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi), abs(lo)):
        return np.full(values.shape, 128, dtype=np.uint8)
    return np.round((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def hfc_dump(image_path, ratio: float, out_path) -> Path:
    img = torch.from_numpy(load_image(image_path)).double().mean(0, keepdim=True)
    hfc = extract_hfc(img, ratio)[0].numpy()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_gray8(hfc), mode="L").save(out_path)
    return out_path


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    overrides = parse_overrides(args.set)
    for key in ("task", "seed", "epochs"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if args.toy:
        overrides["preset"] = "toy"
    if args.dataset:
        overrides["dataset_root"] = str(args.dataset)
    # a resumed run starts from the stored config; the file and flags only layer on top
    ckpt = Checkpoint.load(args.checkpoint) if args.checkpoint else None
    defaults = dict(ckpt.config) if ckpt else {}
    if args.config:
        config = TrainConfig.from_file(args.config, overrides, defaults)
    else:
        config = TrainConfig.from_dict({**defaults, **overrides})

    out_dir = Path(args.out)
    root = config.dataset_root
    if root is None:
        if not args.toy:
            raise UsageError("no dataset: pass --dataset, set dataset_root, or use --toy")
        root = str(write_toy_dataset(out_dir / "toy_data", n=8, seed=config.seed))
        log.info("wrote synthetic toy dataset to %s", root)
    manifest = dataset_manifest(root, config.task, config.dataset_id, config.layout, config.split_rule)

    if ckpt is not None:
        result = resume(ckpt, manifest, max_steps=args.max_steps, checkpoint_dir=out_dir, config=config)
    else:
        model = model_from_config(config)
        result = train(config, model, manifest, max_steps=args.max_steps,
                       checkpoint_dir=None if args.dry_run else out_dir, dry_run=args.dry_run)
    if args.dry_run:
        print(f"dry run ok: {len(manifest.split('train'))} training samples, config valid")
        return EXIT_OK
    print(f"log: {out_dir / 'train_log.jsonl'}")
    print(f"checkpoint: {out_dir / 'final.safetensors'}")
    if result.history:
        print(f"final loss: {result.history[-1]['loss']:.6f} after {result.step} steps")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.bypass_predictions:
        if not args.task:
            raise UsageError("--bypass-predictions needs --task")
        task = args.task
        predictor = MaskPassthrough(instance=task == "cell")
        method = "ground-truth passthrough"
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --bypass-predictions")
        ckpt = Checkpoint.load(args.checkpoint)
        task = ckpt.train_config.task
        if args.task and args.task != task:
            raise ConfigError(f"checkpoint was trained for task {task!r}, not {args.task!r}")
        predictor = Predictor(ckpt.build_model())
        method = Path(args.checkpoint).stem
    if not args.dataset:
        raise UsageError("eval needs --dataset")
    manifest = dataset_manifest(args.dataset, task, args.dataset_id, args.layout, args.split_rule)
    split = None if args.split == "all" else args.split
    report = evaluate_dataset(predictor, manifest, task, split=split,
                              metrics="all" if args.all_metrics else None, workers=args.workers)
    report.method = method
    paths = report.write(args.out, stem=args.stem)
    print(report.headline())
    print(f"report: {paths['json']}")
    return EXIT_OK


def cmd_report(args) -> int:
    text = render_reports(args.reports, fmt=args.format, include_reference=not args.no_reference)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_hfc_dump(args) -> int:
    print(hfc_dump(args.image, args.tau, args.out))
    return EXIT_OK


def cmd_synth(args) -> int:
    root = write_toy_dataset(args.out, n=args.n, seed=args.seed, split=args.split, contrast=args.contrast)
    print(root)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adapterseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train adapters and decoder")
    t.add_argument("--config", type=Path, help="YAML file of TrainConfig keys")
    t.add_argument("--dataset", type=Path, help="dataset root")
    t.add_argument("--task", choices=TASKS)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--toy", action="store_true", help="desk-scale preset; synthesises data if no dataset")
    t.add_argument("--checkpoint", type=Path, help="resume from this checkpoint")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--dry-run", action="store_true", help="validate config and data, write nothing")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    t.add_argument("--out", default="runs/latest", help="checkpoint and log directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--dataset", type=Path)
    e.add_argument("--task", choices=TASKS)
    e.add_argument("--dataset-id")
    e.add_argument("--layout", choices=("paired_dirs", "suffix_paired"))
    e.add_argument("--split-rule")
    e.add_argument("--split", default="test", choices=("train", "test", "all"))
    e.add_argument("--bypass-predictions", action="store_true",
                   help="score the ground-truth masks themselves (pipeline check)")
    e.add_argument("--all-metrics", action="store_true")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out", default="reports")
    e.add_argument("--stem", default="report")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="render measured reports beside reference rows")
    r.add_argument("reports", nargs="+", type=Path)
    r.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    r.add_argument("--no-reference", action="store_true")
    r.add_argument("--out", type=Path)
    r.set_defaults(func=cmd_report)

    h = sub.add_parser("hfc-dump", help="write the high-frequency component of an image as 8-bit gray")
    h.add_argument("image", type=Path)
    h.add_argument("--tau", type=float, default=0.25, help="low-frequency mask ratio")
    h.add_argument("--out", type=Path, required=True)
    h.set_defaults(func=cmd_hfc_dump)

    s = sub.add_parser("synth", help="write a synthetic camouflage-style dataset")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="train", choices=("train", "test"))
    s.add_argument("--contrast", type=float, default=0.12)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ValueError as exc:
        # report rendering and metric-key validation
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        # unreadable report or image paths given on the command line
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
