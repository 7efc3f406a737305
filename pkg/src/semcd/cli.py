"""``semcd`` command line: data preparation, training, prediction, evaluation, baselines.

Every subcommand that reads a dataset takes an optional root argument; when
it is omitted the ``SEMCD_DATA_ROOT`` environment variable is used. A shared
``--config`` file of ``key = value`` lines provides defaults (training keys
such as ``epochs_stage1`` as well as command options such as ``tile`` or
``method``); flags given on the command line take precedence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import baselines
from .config import STRATEGIES, TrainConfig, parse_flat
from .dataset import SPLITS, DatasetIndex, TileSpec, build_index, imbalance_table
from .estimators import SemanticChangeDetector
from .evaluation import evaluate
from .inference import Prediction
from .io import colorize, find_raster, read_raster, write_raster
from .synth import synth_generate

ENV_DATA_ROOT = "SEMCD_DATA_ROOT"
CONFIG_FIELDS = {f.name for f in fields(TrainConfig)} | {"lambda"}

# built-in defaults of command options (used when neither flag nor config sets them)
OPTION_DEFAULTS = {
    "seed": 0,
    "n_pairs": 10,
    "size": 256,
    "change_density": 0.05,
    "n_test": None,
    "noise": 12.0,
    "split": None,
    "tile": 512,
    "stride": None,         # half the tile size
    "method": "otsu",
    "threshold": baselines.FIXED_THRESHOLD,
    "block_size": 4,
    "n_components": 3,
    "format": "table",
}

logger = logging.getLogger("semcd")


class CLIError(Exception):
    """A user-facing error reported with a non-zero exit status."""


# ---------------------------------------------------------------------- helpers


def _data_root(arg: Optional[str]) -> Path:
    root = arg or os.environ.get(ENV_DATA_ROOT)
    if not root:
        raise CLIError(f"no data root given and {ENV_DATA_ROOT} is not set")
    root = Path(root)
    if not root.is_dir():
        raise CLIError(f"data root {root} is not a directory")
    return root


def _load_index(args) -> DatasetIndex:
    return build_index(_data_root(args.root), manifest=getattr(args, "manifest", None))


def _pairs(index: DatasetIndex, split: Optional[str]):
    pairs = list(index.pairs(split))
    if not pairs:
        raise CLIError(f"no pairs in split {split!r}" if split else "dataset is empty")
    return pairs


def _fill_options(args, config: Dict[str, str]) -> None:
    """Resolve options left unset on the command line from config, then defaults."""
    for key, default in OPTION_DEFAULTS.items():
        if hasattr(args, key) and getattr(args, key) is None:
            raw = config.get(key)
            if raw is None:
                setattr(args, key, default)
            else:
                setattr(args, key, _cast_like(default, raw, key))


def _cast_like(default, raw: str, key: str):
    if raw.lower() == "none":
        return None
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise CLIError(f"config key {key!r}: cannot parse {raw!r}") from None
    return raw


def _read_config(path: Optional[str]) -> Dict[str, str]:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"config file {p} not found")
    values = parse_flat(p.read_text())
    unknown = set(values) - CONFIG_FIELDS - set(OPTION_DEFAULTS)
    if unknown:
        raise CLIError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    return values


def _write_prediction(out: Path, pred: Prediction) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_raster(out / "change.png", pred.change)
    write_raster(out / "change_color.png", colorize(pred.change, _BINARY_COLORS))
    if pred.lcm1 is not None:
        write_raster(out / "lcm1.png", pred.lcm1)
        write_raster(out / "lcm1_color.png", colorize(pred.lcm1))
    if pred.lcm2 is not None:
        write_raster(out / "lcm2.png", pred.lcm2)
        write_raster(out / "lcm2_color.png", colorize(pred.lcm2))
    if pred.semantic is not None:
        write_raster(out / "from.png", pred.semantic.from_class)
        write_raster(out / "to.png", pred.semantic.to_class)


_BINARY_COLORS = np.array([[0, 0, 0], [255, 255, 255]], dtype=np.uint8)


def _read_prediction(directory: Path) -> Prediction:
    path = find_raster(directory, "change")
    if path is None:
        raise CLIError(f"{directory} has no change raster")
    lcm = {}
    for role in ("lcm1", "lcm2"):
        p = find_raster(directory, role)
        lcm[role] = read_raster(p) if p is not None else None
    return Prediction(read_raster(path), lcm["lcm1"], lcm["lcm2"])


# --------------------------------------------------------------------- commands


def cmd_synth(args, config) -> int:
    out = synth_generate(
        args.out,
        seed=args.seed,
        n_pairs=args.n_pairs,
        size=args.size,
        change_density=args.change_density,
        n_test=args.n_test,
        noise=args.noise,
    )
    print(f"wrote {args.n_pairs} pairs to {out}")
    return 0


def cmd_index(args, config) -> int:
    index = _load_index(args)
    text = index.to_manifest()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    counts = {s: len(index.select(s)) for s in SPLITS}
    summary = ", ".join(f"{s}: {n}" for s, n in counts.items())
    print(f"{len(index)} pairs ({summary})", file=sys.stderr)
    return 0


def cmd_stats(args, config) -> int:
    index = _load_index(args)
    table = imbalance_table(_pairs(index, args.split), index.nomenclature)
    print(table.format(args.digits))
    return 0


def _train_config(args, config: Dict[str, str]) -> TrainConfig:
    values = {k: v for k, v in config.items() if k in CONFIG_FIELDS}
    for f in fields(TrainConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    if "lambda" in values and "lam" in values:
        values.pop("lambda")
    strategy = values.get("strategy", "S4_2")
    lam = values.get("lam", values.get("lambda"))
    if strategy != "S4_1" and lam not in (None, "none"):
        logger.warning("lambda is only used by S4_1; ignored for %s", strategy)
        values.pop("lam", None)
        values.pop("lambda", None)
    elif strategy == "S4_1" and lam in (None, "none"):
        values["lam"] = 0.05
    return TrainConfig.from_dict(values)


def cmd_train(args, config) -> int:
    cfg = _train_config(args, config)
    index = _load_index(args)
    train_pairs = _pairs(index, "train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    est = SemanticChangeDetector.from_config(cfg)
    est.fit(train_pairs, checkpoint_dir=out, metrics_log=out / "metrics.log")
    est.save(out / "model.pt")
    print(f"trained {cfg.strategy}; checkpoint written to {out / 'model.pt'}")
    return 0


def cmd_predict(args, config) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CLIError(f"checkpoint {ckpt} not found")
    stride = args.stride if args.stride is not None else max(args.tile // 2, 1)
    TileSpec(args.tile, stride)  # validates the tiling before any work
    est = SemanticChangeDetector.load(ckpt, inference_tile=args.tile, inference_stride=stride)
    index = _load_index(args)
    pairs = _pairs(index, args.split)
    out = Path(args.out)
    for pair, pred in zip(pairs, est.predict(pairs)):
        _write_prediction(out / pair.pair_id, pred)
    print(f"wrote predictions for {len(pairs)} pairs to {out}")
    return 0


def cmd_eval(args, config) -> int:
    pred_dir = Path(args.predictions)
    if not pred_dir.is_dir():
        raise CLIError(f"prediction directory {pred_dir} not found")
    index = _load_index(args)
    known = set(index.pair_ids)
    ids = sorted(p.name for p in pred_dir.iterdir() if p.is_dir())
    if args.split:
        allowed = {e.pair_id for e in index.select(args.split)}
        ids = [i for i in ids if i in allowed]
    if not ids:
        raise CLIError(f"no predictions found in {pred_dir}")
    missing = [i for i in ids if i not in known]
    if missing:
        raise CLIError(f"no ground truth for prediction(s): {', '.join(missing)}")
    truths = [index.load(i) for i in ids]
    for t in truths:
        if t.change is None:
            raise CLIError(f"pair {t.pair_id!r} has no ground-truth change map")
    preds = [_read_prediction(pred_dir / i) for i in ids]
    for t, p in zip(truths, preds):
        if (p.lcm1 is not None or p.lcm2 is not None) and not t.has_lcms:
            p.lcm1 = p.lcm2 = None
    report = evaluate(preds, truths)
    if args.out:
        Path(args.out).write_text(report.to_tsv())
    if args.format == "tsv":
        sys.stdout.write(report.to_tsv())
    else:
        print(report.render())
    return 0


def cmd_baseline(args, config) -> int:
    index = _load_index(args)
    pairs = _pairs(index, args.split)
    if args.method == "otsu":
        est = baselines.OtsuChangeDetector()
    elif args.method == "fixed":
        est = baselines.FixedThresholdChangeDetector(args.threshold)
    elif args.method == "pca-kmeans":
        est = baselines.PCAKMeansChangeDetector(args.block_size, args.n_components, args.seed)
    else:
        raise CLIError(f"unknown baseline method {args.method!r}")
    maps = est.fit(pairs).predict(pairs)
    out = Path(args.out)
    for pair, change in zip(pairs, maps):
        _write_prediction(out / pair.pair_id, Prediction(change))
    meta = {"method": args.method, **est.get_params()}
    (out / "baseline.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"wrote {args.method} change maps for {len(pairs)} pairs to {out}")
    if all(p.change is not None for p in pairs):
        print(evaluate([Prediction(c) for c in maps], pairs).render())
    return 0


# ----------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semcd", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key = value file with defaults for any command")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def root_arg(p):
        p.add_argument("root", nargs="?", help=f"dataset root (default: ${ENV_DATA_ROOT})")
        p.add_argument("--manifest", help="manifest file (default: <root>/manifest.tsv or scan)")

    def split_arg(p, help_text):
        p.add_argument("--split", choices=SPLITS, help=help_text)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("out")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-pairs", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--change-density", type=float)
    p.add_argument("--n-test", type=int, help="last N pairs form the test split")
    p.add_argument("--noise", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("index", help="validate a dataset and print its manifest")
    root_arg(p)
    p.add_argument("--out", help="write the manifest here instead of stdout")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("stats", help="print the change class imbalance table")
    root_arg(p)
    split_arg(p, "restrict to one split (default: all pairs)")
    p.add_argument("--digits", type=int, default=3)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a strategy on the train split")
    root_arg(p)
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--lambda", dest="lam", type=float, help="land cover loss weight (S4_1)")
    for name, typ in (
        ("epochs_stage1", int), ("epochs_stage2", int), ("batch_size", int),
        ("learning_rate", float), ("lr_decay", float), ("weight_decay", float),
        ("tile_size", int), ("clip_max", float), ("val_fraction", float),
        ("depth", int), ("blocks_per_level", int), ("base_width", int),
    ):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    p.add_argument("--train-seed", dest="seed_cfg", type=int, help="training seed")
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    p.add_argument("--no-batch-norm", dest="batch_norm", action="store_const", const=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict change and land cover maps")
    p.add_argument("checkpoint")
    root_arg(p)
    p.add_argument("--out", required=True)
    split_arg(p, "pairs to predict (default: all)")
    p.add_argument("--tile", type=int)
    p.add_argument("--stride", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("predictions", help="directory of <pair_id>/change.png [lcm1.png lcm2.png]")
    root_arg(p)
    split_arg(p, "only evaluate pairs of this split")
    p.add_argument("--out", help="write the TSV report here")
    p.add_argument("--format", choices=("table", "tsv"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="unsupervised change detection baselines")
    root_arg(p)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=("otsu", "fixed", "pca-kmeans"))
    p.add_argument("--threshold", type=float)
    p.add_argument("--block-size", type=int)
    p.add_argument("--n-components", type=int)
    p.add_argument("--seed", type=int)
    split_arg(p, "pairs to process (default: all)")
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
    )
    try:
        config = _read_config(args.config)
        if args.command == "train":
            # the training seed lives in TrainConfig; keep it apart from option defaults
            args.seed = args.seed_cfg
        else:
            _fill_options(args, config)
        return args.func(args, config)
    except CLIError as e:
        print(f"semcd: error: {e}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, TypeError) as e:
        print(f"semcd: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
