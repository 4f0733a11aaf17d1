"""Command line entry point: ``fedalign run|report|quantize|predict``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from fedalign.config import ExperimentConfig
from fedalign.data import ConfigError, NormalizationStats, RowParseError, SchemaError
from fedalign.experiment import compare_report, load_results, run_experiment
from fedalign.nn import CheckpointError, ShapeError, load_checkpoint
from fedalign.personalize import FAULT, NORMAL
from fedalign.quantize import BundleFormatError, deserialize_bundle, quantize, serialize_bundle

log = logging.getLogger("fedalign")


def _cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.strategy:
        cfg.strategies = list(args.strategy)
    cfg.validate()
    table = run_experiment(cfg, args.out)
    text, _ = compare_report(table)
    sys.stdout.write(text)
    return 0


def _cmd_report(args) -> int:
    text, js = compare_report(load_results(args.input))
    sys.stdout.write(js + "\n" if args.json else text)
    return 0


def _cmd_quantize(args) -> int:
    params = load_checkpoint(args.model)
    bundle = quantize(params, args.threshold)
    serialize_bundle(bundle, args.out)
    print(f"wrote {args.out} ({Path(args.out).stat().st_size} bytes, threshold {bundle.threshold:.6g})")
    return 0


def _read_rows(path: Path, label: str | None, width: int) -> tuple[np.ndarray, list[str] | None]:
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file")
        cols = [c for c in reader.fieldnames if c != label]
        if label is not None and label not in reader.fieldnames:
            raise SchemaError(f"{path}: missing column {label}")
        if len(cols) != width:
            raise ShapeError(f"{path}: {len(cols)} feature columns, model expects {width}")
        feats, labels = [], []
        for row in reader:
            feats.append([float(row[c]) for c in cols])
            if label is not None:
                labels.append(row[label].strip())
    return np.array(feats, dtype=np.float64).reshape(-1, width), (labels if label is not None else None)


def _cmd_predict(args) -> int:
    bundle = deserialize_bundle(args.bundle)
    X, labels = _read_rows(Path(args.input), args.label, bundle.input_dim)
    if args.stats:
        raw = json.loads(Path(args.stats).read_text())
        X = NormalizationStats(np.asarray(raw["mean"]), np.asarray(raw["std"])).apply(X)
    pred = bundle.score(X) > bundle.threshold
    for p in pred:
        print(FAULT if p else NORMAL)
    if labels is not None:
        truth = np.array([lab == args.positive_label for lab in labels])
        print(f"accuracy: {100.0 * float(np.mean(pred == truth)):.2f}%", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedalign", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write its output directory")
    run.add_argument("--config", help="JSON config; omitted keys take defaults")
    run.add_argument("--out", default="runs/latest")
    run.add_argument("--seed", type=int)
    run.add_argument("--strategy", action="append", help="repeatable; overrides the config's strategy list")
    run.set_defaults(func=_cmd_run)

    rep = sub.add_parser("report", help="print the comparison table of a finished run")
    rep.add_argument("--in", dest="input", required=True)
    rep.add_argument("--json", action="store_true")
    rep.set_defaults(func=_cmd_report)

    qz = sub.add_parser("quantize", help="float checkpoint -> uint8 bundle")
    qz.add_argument("--model", required=True)
    qz.add_argument("--out", required=True)
    qz.add_argument("--threshold", type=float, default=0.5)
    qz.set_defaults(func=_cmd_quantize)

    pr = sub.add_parser("predict", help="classify CSV rows with a bundle")
    pr.add_argument("--bundle", required=True)
    pr.add_argument("--input", required=True)
    pr.add_argument("--stats", help="normalization stats JSON written next to the bundle")
    pr.add_argument("--label", help="label column to drop (and score against)")
    pr.add_argument("--positive-label", default="1")
    pr.set_defaults(func=_cmd_predict)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SchemaError, RowParseError, ShapeError, CheckpointError, BundleFormatError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
