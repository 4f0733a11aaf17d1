"""Similarity-aware federated fault detection with serial meta-initialization,
freeze-and-fine-tune personalization and uint8 deployment."""

from fedalign.config import ExperimentConfig
from fedalign.experiment import ResultsTable, compare_report, phase_evolution_export, run_experiment

__all__ = ["ExperimentConfig", "ResultsTable", "compare_report", "phase_evolution_export", "run_experiment"]
__version__ = "0.1.0"
