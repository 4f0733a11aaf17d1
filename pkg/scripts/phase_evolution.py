#!/usr/bin/env python3
"""Per-client test accuracy after each phase (serial init, parallel rounds,
personalization) for the similarity-aware method. Writes a CSV and, if
matplotlib is installed, a grouped bar chart."""

from __future__ import annotations

import argparse
import csv
import io
from pathlib import Path

from fedalign import ExperimentConfig, phase_evolution_export, run_experiment


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/evolution")
    args = ap.parse_args()

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg.seed = args.seed
    cfg.strategies = ["meta_align"]
    table = run_experiment(cfg)
    text = phase_evolution_export(table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "evolution.csv").write_text(text)
    print(text, end="")

    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    rows = list(csv.DictReader(io.StringIO(text)))
    clients = sorted({r["client_id"] for r in rows})
    checkpoints = ["post_phase1", "post_phase2", "post_phase3"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, cp in enumerate(checkpoints):
        vals = [float(next(r["accuracy"] for r in rows if r["client_id"] == c and r["checkpoint"] == cp))
                for c in clients]
        ax.bar([j + 0.25 * (i - 1) for j in range(len(clients))], vals, width=0.25, label=cp)
    ax.set_xticks(range(len(clients)), clients)
    ax.set_ylabel("test accuracy (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "evolution.png", dpi=120)


if __name__ == "__main__":
    main()
