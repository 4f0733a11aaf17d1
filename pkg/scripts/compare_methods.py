#!/usr/bin/env python3
"""Method comparison on synthetic non-IID clients, averaged over seeds.

    python scripts/compare_methods.py --seeds 0 1 2 --out runs/compare
"""

from __future__ import annotations

import argparse
import json
import math
from pathlib import Path

from fedalign import ExperimentConfig, compare_report, run_experiment


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", help="base JSON config")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/compare")
    args = ap.parse_args()

    base = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    per_seed = {}
    for seed in args.seeds:
        cfg = ExperimentConfig.from_dict({**base.to_dict(), "seed": seed})
        table = run_experiment(cfg, Path(args.out) / f"seed{seed}")
        print(f"== seed {seed}\n{compare_report(table)[0]}")
        per_seed[seed] = table.averages()

    keys = sorted({(m, st) for avg in per_seed.values() for m, stages in avg.items() for st in stages})
    summary = {}
    print(f"== mean over seeds {args.seeds}")
    for method, stage in keys:
        vals = [per_seed[s][method][stage] for s in args.seeds]
        summary[f"{method}/{stage}"] = math.fsum(vals) / len(vals)
        print(f"{method + ' / ' + stage:40s} {summary[f'{method}/{stage}']:6.2f}   " +
              " ".join(f"{v:6.2f}" for v in vals))
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
