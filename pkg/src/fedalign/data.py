"""CSV ingestion, seeded partition trees, normalization and synthetic clients."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PHASE_LEAVES = ("test", "p1_support", "p1_query", "p2_support", "p2_query", "tune", "val")
TRAIN_LEAVES = PHASE_LEAVES[1:]


class SchemaError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CsvSchema:
    feature_columns: tuple[str, ...]
    label_column: str
    positive_label: str = "1"


@dataclass
class RawTable:
    features: np.ndarray
    labels: np.ndarray
    columns: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.labels)


class RowParseError(ValueError):
    def __init__(self, errors: list[tuple[int, str]]):
        self.errors = errors
        head = "; ".join(f"row {i}: {msg}" for i, msg in errors[:10])
        super().__init__(f"{len(errors)} unparseable row(s): {head}")


def load_csv(path, schema: CsvSchema) -> RawTable:
    """Read a CSV into float features and {0,1} labels.

    Row indices in errors are 0-based data rows (header excluded). Any label
    value other than ``positive_label`` maps to 0, but more than two distinct
    label values is rejected.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file")
        header = [h.strip() for h in reader.fieldnames]
        reader.fieldnames = header
        missing = [c for c in (*schema.feature_columns, schema.label_column) if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        feats, labels, errors = [], [], []
        raw_labels = set()
        for i, row in enumerate(reader):
            try:
                vals = [float(row[c]) for c in schema.feature_columns]
            except (TypeError, ValueError) as exc:
                errors.append((i, str(exc)))
                continue
            if not all(math.isfinite(v) for v in vals):
                errors.append((i, "non-finite feature value"))
                continue
            lab = (row[schema.label_column] or "").strip()
            raw_labels.add(lab)
            feats.append(vals)
            labels.append(1 if lab == schema.positive_label else 0)
    if errors:
        raise RowParseError(errors)
    if not labels:
        raise SchemaError(f"{path}: no data rows")
    if len(raw_labels) > 2:
        raise SchemaError(f"{path}: label column {schema.label_column!r} has {len(raw_labels)} distinct values, expected 2")
    return RawTable(np.array(feats, dtype=np.float64), np.array(labels, dtype=np.int64), schema.feature_columns)


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Floor each share; the remainder goes to the largest-ratio leaf (first on ties)."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios {list(ratios)} do not sum to 1")
    if any(r < 0 for r in ratios):
        raise ConfigError("ratios must be non-negative")
    sizes = [int(math.floor(n * r + 1e-9)) for r in ratios]
    sizes[int(np.argmax(ratios))] += n - sum(sizes)
    return sizes


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def support_query_split(indices, seed, support_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    indices = np.asarray(indices)
    if not 0.0 < support_fraction < 1.0:
        raise ConfigError("support_fraction must be in (0, 1)")
    if len(indices) < 2:
        raise ConfigError(f"cannot split {len(indices)} row(s) into support and query")
    n_support, _ = split_sizes(len(indices), [support_fraction, 1.0 - support_fraction])
    perm = _rng(seed).permutation(len(indices))
    return indices[perm[:n_support]], indices[perm[n_support:]]


@dataclass(frozen=True)
class PartitionConfig:
    test_fraction: float = 0.2
    phase_ratios: tuple[float, float, float] = (0.2, 0.5, 0.3)
    support_fraction: float = 0.8
    tune_fraction: float = 0.8


def partition_indices(n: int, seed: int, cfg: PartitionConfig = PartitionConfig()) -> dict[str, np.ndarray]:
    """Partition tree over row indices ``0..n-1``.

    Top level: train/test. Train: p1/p2/personal. p1 and p2 split into
    support/query; personal splits into tune/val. Leaves only are returned,
    plus the intermediate ``train``, ``p1``, ``p2``, ``personal`` sets.
    """
    ss = np.random.SeedSequence(seed)
    s_top, s_p1, s_p2, s_pers = ss.spawn(4)
    n_test, n_train = split_sizes(n, [cfg.test_fraction, 1.0 - cfg.test_fraction])
    perm = _rng(s_top).permutation(n)
    test, train = np.sort(perm[:n_test]), perm[n_test:]
    n1, n2, _ = split_sizes(n_train, cfg.phase_ratios)
    p1, p2, personal = train[:n1], train[n1 : n1 + n2], train[n1 + n2 :]
    parts = {"test": test, "train": np.sort(train), "p1": np.sort(p1), "p2": np.sort(p2), "personal": np.sort(personal)}
    for name, subset, s in (("p1", p1, s_p1), ("p2", p2, s_p2)):
        if len(subset) < 2:
            raise ConfigError(f"{name} partition has {len(subset)} row(s); need at least 2")
        sup, qry = support_query_split(subset, s, cfg.support_fraction)
        parts[f"{name}_support"], parts[f"{name}_query"] = sup, qry
    if len(personal) < 2:
        raise ConfigError(f"personal partition has {len(personal)} row(s); need at least 2")
    tune, val = support_query_split(personal, s_pers, cfg.tune_fraction)
    parts["tune"], parts["val"] = tune, val
    for leaf in PHASE_LEAVES:
        if len(parts[leaf]) < 1:
            raise ConfigError(f"dataset of {n} rows leaves partition {leaf!r} empty")
    return parts


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> NormalizationStats:
        return cls(X.mean(axis=0), np.maximum(X.std(axis=0), 1e-8))

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std


@dataclass
class ClientDataset:
    client_id: str
    features: np.ndarray
    labels: np.ndarray
    partitions: dict[str, np.ndarray] = field(default_factory=dict)
    stats: NormalizationStats | None = None

    def rows(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.partitions[name]
        return self.features[idx], self.labels[idx].astype(np.float64)

    def audit(self) -> dict:
        """Partition sizes and a digest of the index lists."""
        h = hashlib.sha256()
        for name in sorted(self.partitions):
            h.update(name.encode())
            h.update(np.asarray(self.partitions[name], dtype="<i8").tobytes())
        return {
            "client_id": self.client_id,
            "n_rows": int(len(self.labels)),
            "sizes": {k: int(len(v)) for k, v in sorted(self.partitions.items())},
            "sha256": h.hexdigest(),
        }


def partition(table: RawTable, seed: int, cfg: PartitionConfig = PartitionConfig(), client_id: str = "client",
              normalize: bool = True) -> ClientDataset:
    """Build a ClientDataset; z-scoring stats come from the training rows only."""
    parts = partition_indices(len(table), seed, cfg)
    X = np.asarray(table.features, dtype=np.float64)
    stats = None
    if normalize:
        stats = NormalizationStats.fit(X[parts["train"]])
        X = stats.apply(X)
    return ClientDataset(client_id, X, np.asarray(table.labels, dtype=np.int64), parts, stats)


def partition_report(clients: Sequence[ClientDataset]) -> str:
    return json.dumps([c.audit() for c in clients], indent=2, sort_keys=True)


# -- synthetic non-IID clients --------------------------------------------------

N_FEATURES = 9
CLASS_SEPARATION = 3.0


def _basis(seed: int, d: int) -> np.ndarray:
    q, _ = np.linalg.qr(_rng(seed).normal(size=(d, d)))
    return q


def _draw(n_rows: int, direction: np.ndarray, rng: np.random.Generator, separation: float) -> RawTable:
    labels = np.zeros(n_rows, dtype=np.int64)
    labels[: n_rows // 2] = 1
    labels = rng.permutation(labels)
    signs = 2.0 * labels - 1.0
    X = rng.normal(size=(n_rows, len(direction))) + np.outer(signs * separation / 2.0, direction)
    return RawTable(X, labels, tuple(f"f{i}" for i in range(len(direction))))


def client_angles(n_clients: int, drift: float) -> np.ndarray:
    """Boundary angle per client, spread symmetrically around the base direction.

    Extreme clients sit ``drift * pi/2`` apart: drift=1 makes their boundaries
    orthogonal, the largest angle two hyperplanes can form.
    """
    if n_clients == 1:
        return np.zeros(1)
    return drift * (np.pi / 2) * (np.arange(n_clients) / (n_clients - 1) - 0.5)


def synth_tables(n_clients: int, n_rows: int, drift: float, seed: int,
                 separation: float = CLASS_SEPARATION) -> list[RawTable]:
    if n_clients < 2:
        raise ConfigError("need at least 2 clients")
    if n_rows < 40:
        raise ConfigError("need at least 40 rows per client")
    if not 0.0 <= drift <= 1.0:
        raise ConfigError("drift must be in [0, 1]")
    ss = np.random.SeedSequence(seed)
    s_basis, *s_clients = ss.spawn(n_clients + 1)
    q = _basis(s_basis, N_FEATURES)
    u, w = q[:, 0], q[:, 1]
    tables = []
    for angle, s in zip(client_angles(n_clients, drift), s_clients):
        direction = np.cos(angle) * u + np.sin(angle) * w
        tables.append(_draw(n_rows, direction, _rng(s), separation))
    return tables


def synth_public(n_rows: int, seed: int, separation: float = CLASS_SEPARATION) -> RawTable:
    """Public pre-training data: the unrotated base boundary shared by all clients.

    Uses the same basis as ``synth_tables`` for the same seed.
    """
    ss = np.random.SeedSequence(seed)
    q = _basis(ss.spawn(1)[0], N_FEATURES)
    return _draw(n_rows, q[:, 0], _rng([seed, 0x9B11C]), separation)


def synth_noniid_clients(n_clients: int, n_rows: int, drift: float, seed: int,
                         cfg: PartitionConfig = PartitionConfig(), separation: float = CLASS_SEPARATION) -> list[ClientDataset]:
    """Gaussian clients whose class-conditional means rotate apart with ``drift``.

    drift=0 gives identically distributed clients.
    """
    tables = synth_tables(n_clients, n_rows, drift, seed, separation)
    return [partition(t, seed + 1000 * (i + 1), cfg, client_id=f"client{i}") for i, t in enumerate(tables)]


def redraw_support_query(client: ClientDataset, phase: str, seed, support_fraction: float = 0.8) -> ClientDataset:
    """Copy of ``client`` with the ``phase`` ('p1' or 'p2') support/query split re-drawn."""
    sup, qry = support_query_split(client.partitions[phase], seed, support_fraction)
    parts = dict(client.partitions)
    parts[f"{phase}_support"], parts[f"{phase}_query"] = sup, qry
    return ClientDataset(client.client_id, client.features, client.labels, parts, client.stats)
