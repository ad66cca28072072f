"""Command-line entry point: ``forge``, ``toy``, ``train``, ``eval``, ``heatmap``.

Exit codes: 0 success, 2 usage/config/data error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

from .config import ConfigError, RunConfig, load_config
from .data import (
    TARGET,
    DomainDataset,
    NoiseSpec,
    forge_dataset,
    generate_toy_corpus,
    load_dataset,
    load_parts,
    save_dataset,
    save_toy_corpus,
    split_dataset,
)
from .heatmap import export_heatmaps
from .model import load_checkpoint
from .trainer import ABLATIONS, evaluate, init_model, train

log = logging.getLogger("msatl")


class UsageError(Exception):
    """Bad input detected before or during setup (exit code 2)."""


def _load_corpus(cfg: RunConfig) -> Tuple[DomainDataset, List[DomainDataset]]:
    target_dir, source_dirs = cfg.data.resolve()
    if not source_dirs:
        raise UsageError(f"no source directories found for {target_dir.parent}")
    target = load_dataset(target_dir, TARGET)
    sources = [load_dataset(d, i) for i, d in enumerate(source_dirs, start=1)]
    return target, sources


def _splits(cfg: RunConfig, target: DomainDataset):
    return split_dataset(target, cfg.data.split, cfg.data.split_seed)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _config_with_overrides(args) -> RunConfig:
    cfg = load_config(args.config)
    train_cfg = cfg.train
    if getattr(args, "ablation", None):
        train_cfg = replace(train_cfg, ablation=args.ablation)
    if getattr(args, "seed", None) is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    cfg.train = train_cfg
    if getattr(args, "out", None):
        cfg.out_dir = Path(args.out)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------


def cmd_forge(args) -> int:
    ds = load_dataset(args.input, TARGET)
    parts = [load_parts(args.parts, s.sample_id) for s in ds]
    known = sorted(parts[0].names)
    if args.keep not in known:
        raise UsageError(f"unknown part {args.keep!r}; known parts: {', '.join(known)}")
    for p, s in zip(parts, ds):
        p.check_covers(s.mask)
    noise = NoiseSpec(args.mean, args.variance, args.seed)
    forged = forge_dataset(ds, parts, args.keep, noise, source_index=args.index)
    out = Path(args.out) / f"source_{args.keep}"
    save_dataset(forged, out)
    print(f"forged {len(forged)} samples into {out}")
    return 0


def cmd_toy(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    seed = args.seed if args.seed is not None else cfg.toy_seed
    target, sources = generate_toy_corpus(cfg.toy, seed)
    save_toy_corpus(target, sources, args.out)
    print(f"wrote {len(target)} target and {len(sources)}x{len(sources[0])} source samples "
          f"to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_with_overrides(args)
    if cfg.out_dir is None:
        raise UsageError("no output directory: set [train] out_dir or pass --out")
    target, sources = _load_corpus(cfg)
    train_set, val_set, test_set = _splits(cfg, target)
    model = init_model(cfg.train, cfg.model_config(len(sources)), len(sources))
    model, history = train(model, train_set, sources, cfg.train, val=val_set,
                           out_dir=cfg.out_dir, record_steps=False)
    report = evaluate(model, test_set)
    _write_json(cfg.out_dir / "metrics_test.json", report.to_dict())
    print(f"best epoch {history.best_epoch}: val dice {history.best_val_dice:.4f}; "
          f"test dice {report.mean['dice']:.4f} +- {report.std['dice']:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_with_overrides(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else (cfg.out_dir or Path(".")) / "checkpoint_best.pt"
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    if args.data:
        dataset = load_dataset(args.data, TARGET)
    else:
        target, _ = _load_corpus(cfg)
        dataset = _splits(cfg, target)[2]
    report = evaluate(model, dataset)
    out = Path(args.out) if args.out else ckpt.parent
    _write_json(out / "metrics_test.json", report.to_dict())
    print(f"iou {report.mean['iou']:.4f} +- {report.std['iou']:.4f}; "
          f"dice {report.mean['dice']:.4f} +- {report.std['dice']:.4f} over {len(dataset)} images")
    return 0


def cmd_heatmap(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    image = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.uint8)
    size = model.cfg.image_size
    if image.shape[:2] != (size, size):
        raise UsageError(f"image is {image.shape[1]}x{image.shape[0]}, model expects {size}x{size}")
    paths = export_heatmaps(model, image, args.out, stem=Path(args.image).stem)
    for p in paths:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msatl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forge", help="occlude all but one part with Gaussian noise")
    p.add_argument("--input", required=True, help="dataset root with images/ and masks/")
    p.add_argument("--parts", required=True, help="directory of <part>/<stem>.png masks")
    p.add_argument("--keep", required=True, help="part left visible and labelled")
    p.add_argument("--mean", type=float, default=127.0)
    p.add_argument("--variance", type=float, default=255.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--index", type=int, default=1, help="source domain index of the output")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forge)

    p = sub.add_parser("toy", help="generate the synthetic toy corpus")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_toy)

    for name, func, help_ in (("train", cmd_train, "train a model"),
                              ("eval", cmd_eval, "evaluate a checkpoint on the test split")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config")
        p.add_argument("--ablation", choices=ABLATIONS)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        if name == "eval":
            p.add_argument("--checkpoint")
            p.add_argument("--data", help="evaluate every sample of this dataset instead")
        p.set_defaults(func=func)

    p = sub.add_parser("heatmap", help="export per-sub-network saliency heat maps")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"msatl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"msatl {args.command}: failed: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
