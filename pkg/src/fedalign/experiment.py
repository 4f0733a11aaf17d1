"""End-to-end experiment runner and report writers.

Output directory layout::

    config.json  partitions.json  history.jsonl  results.json  results.txt
    evolution.csv  footprint.json  bundles/
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from fedalign.config import ExperimentConfig
from fedalign.data import (
    ClientDataset,
    ConfigError,
    CsvSchema,
    NormalizationStats,
    RawTable,
    load_csv,
    partition,
    partition_report,
    synth_noniid_clients,
    synth_public,
)
from fedalign.nn import ModelParams, accuracy, default_dims, init_params, predict_proba, save_checkpoint
from fedalign.personalize import (
    PersonalizedModel,
    ThresholdError,
    best_threshold,
    f1_score,
    params_digest,
    personalize_finetune,
    predict_labels,
    prefix_digest,
)
from fedalign.protocol import history_jsonl, phase0_pretrain, phase1_serial_meta_init, run_phase2
from fedalign.quantize import measure_footprint, quantize, serialize_bundle

log = logging.getLogger(__name__)

STAGES = ("global", "after_personalization")
CHECKPOINTS = ("post_phase1", "post_phase2", "post_phase3")


class ExperimentError(RuntimeError):
    pass


@dataclass
class ResultEntry:
    strategy: str
    client_id: str
    stage: str
    accuracy: float
    f1: float
    threshold: float

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "client_id": self.client_id,
            "stage": self.stage,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "threshold": self.threshold,
        }


@dataclass
class ResultsTable:
    entries: list[ResultEntry] = field(default_factory=list)
    evolution: list[dict] = field(default_factory=list)
    personalization: list[dict] = field(default_factory=list)
    audit: dict = field(default_factory=dict)

    def averages(self) -> dict[str, dict[str, float]]:
        groups: dict[tuple[str, str], list[float]] = {}
        for e in self.entries:
            groups.setdefault((e.strategy, e.stage), []).append(e.accuracy)
        out: dict[str, dict[str, float]] = {}
        for (strategy, stage), vals in groups.items():
            out.setdefault(strategy, {})[stage] = math.fsum(vals) / len(vals)
        return out

    def accuracy_of(self, strategy: str, stage: str, client_id: str | None = None) -> float:
        if client_id is None:
            return self.averages()[strategy][stage]
        for e in self.entries:
            if (e.strategy, e.stage, e.client_id) == (strategy, stage, client_id):
                return e.accuracy
        raise KeyError((strategy, stage, client_id))

    def to_dict(self) -> dict:
        return {
            "entries": [e.to_dict() for e in self.entries],
            "averages": self.averages(),
            "evolution": self.evolution,
            "personalization": self.personalization,
            "audit": self.audit,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> ResultsTable:
        return cls([ResultEntry(**e) for e in d["entries"]], d.get("evolution", []), d.get("personalization", []),
                   d.get("audit", {}))


# -- data ------------------------------------------------------------------------

def build_data(cfg: ExperimentConfig) -> tuple[list[ClientDataset], tuple[np.ndarray, np.ndarray]]:
    pcfg = cfg.partition_config
    if cfg.client_csvs:
        schema = CsvSchema(tuple(cfg.feature_columns), cfg.label_column, cfg.positive_label)
        clients = [partition(load_csv(p, schema), cfg.seed + 1000 * (i + 1), pcfg, client_id=f"client{i}")
                   for i, p in enumerate(cfg.client_csvs)]
        if cfg.public_csv:
            public = load_csv(cfg.public_csv, schema)
        else:
            # No public set: pre-train on nothing (phase 0 reduces to the random init).
            public = RawTable(np.zeros((0, len(cfg.feature_columns))), np.zeros(0, dtype=np.int64))
    else:
        clients = synth_noniid_clients(cfg.n_clients, cfg.rows_per_client, cfg.drift, cfg.seed, pcfg)
        public = synth_public(cfg.public_rows, cfg.seed)
    if len(public):
        stats = NormalizationStats.fit(public.features)
        pub = (stats.apply(public.features), public.labels.astype(np.float64))
    else:
        pub = (public.features, public.labels.astype(np.float64))
    return clients, pub


# -- phases ----------------------------------------------------------------------

def _test_metrics(scores: np.ndarray, labels: np.ndarray, tau: float) -> tuple[float, float]:
    pred = scores > tau
    acc = 100.0 * float(np.mean(pred == (labels == 1)))
    return acc, f1_score(pred, labels)


def personalize_client(global_params: ModelParams, client: ClientDataset, cfg: ExperimentConfig,
                       finetune: bool = True) -> tuple[PersonalizedModel, dict]:
    """Fine-tune, pick the F1 threshold, quantize, evaluate on the test split."""
    tune = client.rows("tune")
    params = personalize_finetune(global_params, tune, cfg.finetune_lr, cfg.finetune_epochs) if finetune \
        else global_params.copy()
    vx, vy = client.rows("val")
    try:
        tau, val_f1 = best_threshold(predict_proba(params, vx), vy)
    except ThresholdError:
        if not cfg.threshold_fallback:
            raise
        log.warning("client %s: degenerate validation labels, threshold falls back to 0.5", client.client_id)
        tau, val_f1 = 0.5, float("nan")
    model = PersonalizedModel(params, tau, client.client_id, params_digest(global_params))
    bundle = quantize(params, tau)
    tx, ty = client.rows("test")
    deployed = predict_labels(bundle, tx)
    acc = 100.0 * float(np.mean(deployed == ty))
    f1 = f1_score(deployed, ty)
    float_acc, _ = _test_metrics(predict_proba(params, tx), ty, tau)
    pre_acc = accuracy(global_params, tx, ty)
    n_frozen = params.n_layers // 2
    report = {
        "client_id": client.client_id,
        "pre_accuracy": pre_acc,
        "post_accuracy": acc,
        "post_float_accuracy": float_acc,
        "threshold": bundle.threshold,
        "val_f1_at_threshold": val_f1,
        "test_f1": f1,
        "frozen_layers": n_frozen if finetune else 0,
        "global_prefix_sha256": prefix_digest(global_params, n_frozen),
        "personal_prefix_sha256": prefix_digest(params, n_frozen),
        "provenance": model.provenance,
    }
    return model, report


@dataclass
class StrategyRun:
    strategy: str
    global_model: ModelParams | None
    personalized: dict[str, PersonalizedModel]
    reports: list[dict]
    history: list
    checkpoints: dict[str, dict[str, float]] = field(default_factory=dict)


def _global_accuracy(params: ModelParams, clients: Sequence[ClientDataset]) -> dict[str, float]:
    return {c.client_id: accuracy(params, *c.rows("test")) for c in clients}


def run_strategy(strategy: str, w_base: ModelParams, clients: list[ClientDataset], cfg: ExperimentConfig,
                 ) -> StrategyRun:
    rc = cfg.round_config
    redraw = cfg.seed if cfg.redraw_splits else None
    checkpoints: dict[str, dict[str, float]] = {}
    history: list = []
    if strategy == "local_only":
        personalized, reports = {}, []
        for c in clients:
            local, _ = run_phase2(w_base, [c], rc, "fedavg", redraw, cfg.support_fraction)
            model, rep = personalize_client(local, c, cfg, cfg.personalize)
            personalized[c.client_id] = model
            reports.append(rep)
        return StrategyRun(strategy, None, personalized, reports, history)
    start = w_base
    if strategy == "meta_align":
        start, diag = phase1_serial_meta_init(w_base, clients, rc.r_serial, rc.e_serial, cfg.seed, rc.local_lr,
                                              redraw, cfg.support_fraction)
        checkpoints["post_phase1"] = _global_accuracy(start, clients)
    w_final, history = run_phase2(start, clients, rc, strategy, redraw, cfg.support_fraction)
    checkpoints["post_phase2"] = _global_accuracy(w_final, clients)
    personalized, reports = {}, []
    for c in clients:
        model, rep = personalize_client(w_final, c, cfg, cfg.personalize)
        personalized[c.client_id] = model
        reports.append(rep)
    checkpoints["post_phase3"] = {r["client_id"]: r["post_accuracy"] for r in reports}
    return StrategyRun(strategy, w_final, personalized, reports, history, checkpoints)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ResultsTable:
    """Run every configured strategy on one shared set of partitions."""
    cfg.validate()
    clients, public = build_data(cfg)
    dims = default_dims(clients[0].features.shape[1], cfg.hidden)
    try:
        w_base = phase0_pretrain(*public, dims, cfg.phase0_epochs, cfg.lr, cfg.seed) if len(public[1]) else None
    except Exception as exc:
        raise ExperimentError(f"phase 0: {exc}") from exc
    if w_base is None:
        w_base = init_params(dims, cfg.seed)
    audit_ref = json.loads(partition_report(clients))
    table = ResultsTable(audit={"partitions": audit_ref, "strategies": {}})
    runs: dict[str, StrategyRun] = {}
    for strategy in cfg.strategies:
        used = json.loads(partition_report(clients))
        if used != audit_ref:
            raise ExperimentError(f"{strategy}: partitions differ from the shared audit")
        table.audit["strategies"][strategy] = [c["sha256"] for c in used]
        try:
            run = run_strategy(strategy, w_base, clients, cfg)
        except Exception as exc:
            raise ExperimentError(f"strategy {strategy}: {exc}") from exc
        runs[strategy] = run
        if run.global_model is not None:
            for c in clients:
                acc, f1 = _test_metrics(predict_proba(run.global_model, c.rows("test")[0]), c.rows("test")[1], 0.5)
                table.entries.append(ResultEntry(strategy, c.client_id, "global", acc, f1, 0.5))
        if cfg.personalize or strategy == "local_only":
            for rep in run.reports:
                table.entries.append(ResultEntry(strategy, rep["client_id"], "after_personalization",
                                                 rep["post_accuracy"], rep["test_f1"], rep["threshold"]))
        for rep in run.reports:
            table.personalization.append({"strategy": strategy, **rep})
        for checkpoint in CHECKPOINTS:
            for cid, acc in sorted(run.checkpoints.get(checkpoint, {}).items()):
                table.evolution.append({"strategy": strategy, "client_id": cid, "checkpoint": checkpoint,
                                        "accuracy": acc})
    if out_dir is not None:
        write_outputs(Path(out_dir), cfg, clients, table, runs)
    return table


# -- reports ---------------------------------------------------------------------

def compare_report(results: ResultsTable) -> tuple[str, str]:
    """Aligned text table (Method / client columns / Average) plus JSON."""
    client_ids = sorted({e.client_id for e in results.entries})
    rows = []
    order = {s: i for i, s in enumerate(("local_only", "fedavg", "fedprox", "meta_align"))}
    keys = sorted({(e.strategy, e.stage) for e in results.entries},
                  key=lambda k: (order.get(k[0], 99), k[0], STAGES.index(k[1])))
    avgs = results.averages()
    for strategy, stage in keys:
        cells = []
        for cid in client_ids:
            try:
                cells.append(f"{results.accuracy_of(strategy, stage, cid):.2f}")
            except KeyError:
                cells.append("-")
        rows.append([f"{strategy} / {stage}", *cells, f"{avgs[strategy][stage]:.2f}"])
    header = ["Method", *client_ids, "Average"]
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [header, *rows]]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n", results.to_json()


def phase_evolution_export(results: ResultsTable, strategy: str = "meta_align") -> str:
    rows = [e for e in results.evolution if e["strategy"] == strategy]
    if not rows:
        raise ExperimentError(f"no phase checkpoints recorded for {strategy}")
    by_client: dict[str, dict[str, float]] = {}
    for e in rows:
        by_client.setdefault(e["client_id"], {})[e["checkpoint"]] = e["accuracy"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["client_id", "checkpoint", "accuracy"])
    for cid in sorted(by_client):
        for checkpoint in CHECKPOINTS:
            if checkpoint not in by_client[cid]:
                raise ExperimentError(f"client {cid} is missing checkpoint {checkpoint}")
            w.writerow([cid, checkpoint, repr(by_client[cid][checkpoint])])
    return buf.getvalue()


def write_outputs(out: Path, cfg: ExperimentConfig, clients: Sequence[ClientDataset], table: ResultsTable,
                  runs: dict[str, StrategyRun]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    bundles = out / "bundles"
    bundles.mkdir(exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "partitions.json").write_text(partition_report(clients) + "\n")
    with (out / "history.jsonl").open("w") as fh:
        for strategy, run in runs.items():
            for line in history_jsonl(run.history).splitlines():
                rec = json.loads(line)
                rec["strategy"] = strategy
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    text, js = compare_report(table)
    (out / "results.json").write_text(js + "\n")
    (out / "results.txt").write_text(text)
    if any(e["strategy"] == "meta_align" for e in table.evolution):
        (out / "evolution.csv").write_text(phase_evolution_export(table))
    by_id = {c.client_id: c for c in clients}
    footprints = {}
    for strategy, run in runs.items():
        for cid, model in sorted(run.personalized.items()):
            stem = f"{strategy}_{cid}"
            save_checkpoint(model.params, bundles / f"{stem}.fma")
            bundle = quantize(model.params, model.threshold)
            serialize_bundle(bundle, bundles / f"{stem}.fmq")
            stats = by_id[cid].stats
            if stats is not None:
                (bundles / f"{cid}_stats.json").write_text(json.dumps(
                    {"mean": stats.mean.tolist(), "std": stats.std.tolist()}, indent=2) + "\n")
            if strategy == cfg.strategies[0] or strategy == "meta_align":
                probe = by_id[cid].rows("test")[0][:20]
                rep = measure_footprint(model.params, bundle, probe, cfg.footprint_repeats)
                footprints[stem] = json.loads(rep.to_json())
    (out / "footprint.json").write_text(json.dumps(footprints, indent=2, sort_keys=True) + "\n")


def load_results(in_dir) -> ResultsTable:
    return ResultsTable.from_dict(json.loads((Path(in_dir) / "results.json").read_text()))
