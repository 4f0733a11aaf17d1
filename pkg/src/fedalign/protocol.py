"""Client/server logic for pre-training, serial meta-initialization and parallel rounds.

Aggregation strategies:

* ``meta_align``: updates weighted by ``s * max(c, cos(delta, mean_delta))``,
  normalized, then applied with a server step size ``alpha``.
* ``fedavg``: sample-count weighted average of client models.
* ``fedprox``: FedAvg aggregation, local training with a proximal term.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from fedalign.data import ClientDataset, ConfigError, redraw_support_query
from fedalign.nn import (
    AdamState,
    FreezeMask,
    ModelParams,
    ShapeError,
    TrainingError,
    backward,
    bce_loss,
    forward,
    init_params,
    mean_bce,
    train_online,
)

log = logging.getLogger(__name__)

STRATEGIES = ("meta_align", "fedavg", "fedprox")
NORM_FLOOR = 1e-12


class RoundError(RuntimeError):
    pass


class ClientFault(RuntimeError):
    pass


@dataclass(frozen=True)
class RoundConfig:
    alpha: float = 1.0
    c: float = 0.1
    r_serial: int = 10
    r_parallel: int = 10
    e_serial: int = 1
    local_epochs: int = 1
    local_lr: float = 1e-5
    mu: float = 0.01

    def validate(self) -> None:
        if not 0.0 < self.c < 1.0:
            raise ConfigError(f"similarity floor c={self.c} must be in (0, 1)")
        if self.alpha <= 0:
            raise ConfigError("server learning rate alpha must be positive")
        if self.r_serial < 0 or self.r_parallel < 0 or self.e_serial < 0 or self.local_epochs < 1:
            raise ConfigError("round and epoch counts must be non-negative (local_epochs >= 1)")
        if self.mu < 0:
            raise ConfigError("mu must be non-negative")
        if self.local_lr <= 0:
            raise ConfigError("local_lr must be positive")


@dataclass
class ClientUpdate:
    client_id: str
    delta: np.ndarray
    query_score: float
    sample_count: int
    query_loss: float = float("nan")


@dataclass
class ClientWeight:
    client_id: str
    theta: float
    weight: float
    norm_weight: float
    query_score: float
    query_loss: float


@dataclass
class AggregationOutcome:
    new_global: ModelParams
    clients: list[ClientWeight]
    round_index: int = 0
    dropped: list[str] = field(default_factory=list)

    def record(self) -> dict:
        return {
            "round": self.round_index,
            "clients": [
                {
                    "client_id": cw.client_id,
                    "s_t": cw.query_score,
                    "theta_t": cw.theta,
                    "w_t": cw.weight,
                    "w_hat_t": cw.norm_weight,
                    "query_loss": cw.query_loss,
                }
                for cw in self.clients
            ],
            "dropped": list(self.dropped),
        }


# -- phase 0 / phase 1 ------------------------------------------------------------

def phase0_pretrain(X, y, dims: Sequence[int], epochs: int, lr: float, seed: int) -> ModelParams:
    """Centralized online pre-training from a seeded random initialization."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ConfigError("public dataset is empty")
    if X.shape[1] != dims[0]:
        raise ShapeError(f"public data has {X.shape[1]} features, architecture expects {dims[0]}")
    params = init_params(dims, seed)
    params, _ = train_online(params, AdamState.zeros(params.size, lr=lr), (X, np.asarray(y)), epochs=epochs)
    return params


def visit_orders(client_ids: Sequence[str], rounds: int, seed: int) -> list[list[str]]:
    rng = np.random.default_rng(seed)
    ids = sorted(client_ids)
    return [[ids[i] for i in rng.permutation(len(ids))] for _ in range(rounds)]


def phase1_serial_meta_init(
    w_base: ModelParams,
    clients: Sequence[ClientDataset],
    r_serial: int,
    e_serial: int,
    seed: int,
    lr: float = 1e-5,
    redraw_seed: int | None = None,
    support_fraction: float = 0.8,
) -> tuple[ModelParams, list[dict]]:
    """Carry one model through every client's P1 support set, in a reshuffled
    order each round. Query losses are diagnostics only.

    With ``redraw_seed`` set, each client's P1 support/query split is re-drawn
    every round instead of staying fixed.
    """
    by_id = {c.client_id: c for c in clients}
    for c in clients:
        if len(c.partitions.get("p1_support", ())) == 0:
            raise ConfigError(f"client {c.client_id} has an empty P1 support set")
    w = w_base.copy()
    diagnostics = []
    for r, order in enumerate(visit_orders(list(by_id), r_serial, seed)):
        for cid in order:
            client = by_id[cid]
            if redraw_seed is not None:
                client = redraw_support_query(client, "p1", [redraw_seed, r, sorted(by_id).index(cid)], support_fraction)
            w, _ = train_online(w, AdamState.zeros(w.size, lr=lr), client.rows("p1_support"), epochs=e_serial)
            qx, qy = client.rows("p1_query")
            loss = mean_bce(w, qx, qy) if len(qy) else float("nan")
            diagnostics.append({"round": r, "client_id": cid, "query_loss": loss})
    return w, diagnostics


# -- phase 2 -------------------------------------------------------------------

def query_score(query_loss: float) -> float:
    return 1.0 / (1.0 + query_loss)


def client_local_round(global_params: ModelParams, client: ClientDataset, lr: float, epochs: int = 1,
                       mu: float = 0.0) -> ClientUpdate:
    sx, sy = client.rows("p2_support")
    qx, qy = client.rows("p2_query")
    if len(sy) == 0 or len(qy) == 0:
        raise ConfigError(f"client {client.client_id} has an empty P2 support or query set")
    try:
        trained, _ = train_online(
            global_params, AdamState.zeros(global_params.size, lr=lr), (sx, sy), epochs=epochs,
            prox_anchor=global_params if mu > 0 else None, mu=mu,
        )
    except TrainingError as exc:
        raise ClientFault(f"client {client.client_id}: {exc}") from exc
    loss = mean_bce(trained, qx, qy)
    delta = trained.flat - global_params.flat
    if not math.isfinite(loss) or not np.isfinite(delta).all():
        raise ClientFault(f"client {client.client_id}: non-finite query loss or delta")
    return ClientUpdate(client.client_id, delta, query_score(loss), len(sy), loss)


def cosine_alignment(delta, mean_delta) -> float:
    a = np.asarray(delta, dtype=np.float64)
    b = np.asarray(mean_delta, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        return 0.0
    return float(min(1.0, max(-1.0, float(a @ b) / (na * nb))))


def _usable(updates: Sequence[ClientUpdate], size: int) -> tuple[list[ClientUpdate], list[str]]:
    kept, dropped = [], []
    for u in sorted(updates, key=lambda u: u.client_id):
        if u.delta.shape != (size,):
            raise ShapeError(f"client {u.client_id}: delta length {u.delta.size} != model size {size}")
        if np.isfinite(u.delta).all() and math.isfinite(u.query_score):
            kept.append(u)
        else:
            log.warning("dropping client %s: non-finite update", u.client_id)
            dropped.append(u.client_id)
    if not kept:
        raise RoundError("no usable client updates")
    return kept, dropped


def _ordered_sum(vectors, weights) -> np.ndarray:
    out = np.zeros_like(vectors[0])
    for v, w in zip(vectors, weights):
        out += w * v
    return out


def aggregate_similarity_aware(global_params: ModelParams, updates: Sequence[ClientUpdate], alpha: float = 1.0,
                               c: float = 0.1, round_index: int = 0) -> AggregationOutcome:
    kept, dropped = _usable(updates, global_params.size)
    deltas = [u.delta for u in kept]
    mean_delta = _ordered_sum(deltas, [1.0] * len(deltas)) / len(deltas)
    thetas = [cosine_alignment(d, mean_delta) for d in deltas]
    raw = [u.query_score * max(c, th) for u, th in zip(kept, thetas)]
    total = math.fsum(raw)
    norm = [w / total for w in raw]
    step = _ordered_sum(deltas, norm)
    new_global = global_params.with_flat(global_params.flat + alpha * step)
    diag = [ClientWeight(u.client_id, th, w, wn, u.query_score, u.query_loss)
            for u, th, w, wn in zip(kept, thetas, raw, norm)]
    return AggregationOutcome(new_global, diag, round_index, dropped)


def aggregate_fedavg(global_params: ModelParams, updates: Sequence[ClientUpdate], round_index: int = 0,
                     ) -> AggregationOutcome:
    """Sample-count weighted average of client models ``global + delta_k``."""
    kept, dropped = _usable(updates, global_params.size)
    counts = [u.sample_count for u in kept]
    if any(n <= 0 for n in counts):
        raise RoundError("sample counts must be positive")
    total = sum(counts)
    norm = [n / total for n in counts]
    models = [global_params.flat + u.delta for u in kept]
    new_global = global_params.with_flat(_ordered_sum(models, norm))
    deltas = [u.delta for u in kept]
    mean_delta = _ordered_sum(deltas, [1.0] * len(deltas)) / len(deltas)
    diag = [ClientWeight(u.client_id, cosine_alignment(u.delta, mean_delta), float(n), wn, u.query_score, u.query_loss)
            for u, n, wn in zip(kept, counts, norm)]
    return AggregationOutcome(new_global, diag, round_index, dropped)


def fedprox_local_objective(params: ModelParams, global_snapshot: ModelParams, x, y, mu: float,
                            mask: FreezeMask | None = None) -> tuple[float, np.ndarray]:
    """BCE plus ``mu/2 * ||w - w_global||^2`` and its gradient."""
    if mu < 0:
        raise ConfigError("mu must be non-negative")
    if params.flat.shape != global_snapshot.flat.shape:
        raise ShapeError("global snapshot does not match model")
    diff = params.flat - global_snapshot.flat
    loss = bce_loss(forward(params, x), float(y)) + 0.5 * mu * float(diff @ diff)
    grad = backward(params, x, y, mask)
    prox = mu * diff
    if mask is not None:
        prox[~mask.coordinate_mask(params)] = 0.0
    return loss, grad + prox


def run_phase2(w_star: ModelParams, clients: Sequence[ClientDataset], config: RoundConfig,
               strategy: str = "meta_align", redraw_seed: int | None = None,
               support_fraction: float = 0.8) -> tuple[ModelParams, list[AggregationOutcome]]:
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    for cl in clients:
        if len(cl.partitions.get("p2_support", ())) == 0 or len(cl.partitions.get("p2_query", ())) == 0:
            raise ConfigError(f"client {cl.client_id} is missing P2 partitions")
    mu = config.mu if strategy == "fedprox" else 0.0
    w = w_star.copy()
    history = []
    for r in range(config.r_parallel):
        updates, faulted = [], []
        for i, cl in enumerate(sorted(clients, key=lambda cl: cl.client_id)):
            if redraw_seed is not None:
                cl = redraw_support_query(cl, "p2", [redraw_seed, r, i], support_fraction)
            try:
                updates.append(client_local_round(w, cl, config.local_lr, config.local_epochs, mu))
            except ClientFault as exc:
                log.warning("round %d: %s", r, exc)
                faulted.append(cl.client_id)
        if not updates:
            raise RoundError(f"round {r}: every client dropped out")
        if strategy == "meta_align":
            outcome = aggregate_similarity_aware(w, updates, config.alpha, config.c, r)
        else:
            outcome = aggregate_fedavg(w, updates, r)
        outcome.dropped = sorted(set(outcome.dropped) | set(faulted))
        history.append(outcome)
        w = outcome.new_global
    return w, history


def history_jsonl(history: Sequence[AggregationOutcome]) -> str:
    return "".join(json.dumps(h.record(), sort_keys=True) + "\n" for h in history)
