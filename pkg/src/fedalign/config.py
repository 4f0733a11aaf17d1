"""Experiment configuration: one flat JSON object, every key optional."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from fedalign.data import ConfigError, PartitionConfig
from fedalign.nn import DEFAULT_HIDDEN
from fedalign.protocol import RoundConfig

log = logging.getLogger(__name__)

ALL_STRATEGIES = ("meta_align", "fedavg", "fedprox", "local_only")


@dataclass
class ExperimentConfig:
    seed: int = 0
    strategies: list[str] = field(default_factory=lambda: list(ALL_STRATEGIES))

    # synthetic data (used when client_csvs is empty)
    n_clients: int = 2
    rows_per_client: int = 5000
    drift: float = 0.8
    public_rows: int = 2000

    # CSV data
    client_csvs: list[str] = field(default_factory=list)
    public_csv: str = ""
    feature_columns: list[str] = field(default_factory=list)
    label_column: str = ""
    positive_label: str = "1"

    hidden: list[int] = field(default_factory=lambda: list(DEFAULT_HIDDEN))

    phase0_epochs: int = 5
    lr: float = 1e-5
    r_serial: int = 10
    e_serial: int = 1
    r_parallel: int = 10
    local_epochs: int = 1
    local_lr: float = 1e-5
    alpha: float = 1.0
    c: float = 0.1
    mu: float = 0.01

    personalize: bool = True
    finetune_epochs: int = 10
    finetune_lr: float = 1e-5
    threshold_fallback: bool = True

    test_fraction: float = 0.2
    phase_ratios: list[float] = field(default_factory=lambda: [0.2, 0.5, 0.3])
    support_fraction: float = 0.8
    tune_fraction: float = 0.8
    redraw_splits: bool = False

    footprint_repeats: int = 100

    @property
    def round_config(self) -> RoundConfig:
        return RoundConfig(self.alpha, self.c, self.r_serial, self.r_parallel, self.e_serial, self.local_epochs,
                           self.local_lr, self.mu)

    @property
    def partition_config(self) -> PartitionConfig:
        return PartitionConfig(self.test_fraction, tuple(self.phase_ratios), self.support_fraction,
                               self.tune_fraction)

    def validate(self) -> None:
        bad = [s for s in self.strategies if s not in ALL_STRATEGIES]
        if bad or not self.strategies:
            raise ConfigError(f"unknown or empty strategy list: {bad or self.strategies}")
        if len(set(self.strategies)) != len(self.strategies):
            raise ConfigError("duplicate strategies")
        self.round_config.validate()
        if len(self.phase_ratios) != 3 or abs(sum(self.phase_ratios) - 1.0) > 1e-9:
            raise ConfigError("phase_ratios must be three values summing to 1")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must be in (0, 1)")
        for name in ("support_fraction", "tune_fraction"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must be in (0, 1)")
        if self.client_csvs:
            if not self.feature_columns or not self.label_column:
                raise ConfigError("CSV input needs feature_columns and label_column")
            if len(self.client_csvs) < 1:
                raise ConfigError("need at least one client CSV")
        else:
            if self.n_clients < 2:
                raise ConfigError("synthetic data needs n_clients >= 2")
            if not 0 <= self.drift <= 1:
                raise ConfigError("drift must be in [0, 1]")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be positive")
        if self.finetune_epochs < 1 or self.phase0_epochs < 0:
            raise ConfigError("finetune_epochs >= 1 and phase0_epochs >= 0 required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        cfg = cls(**raw)
        for f in fields(cls):
            if f.name not in raw:
                log.info("config default %s = %r", f.name, getattr(cfg, f.name))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)
