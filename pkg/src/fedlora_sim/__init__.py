"""Federated fine-tuning of low-rank adapters under heterogeneous layer budgets.

A deterministic, CPU-only simulator: a toy transformer with query/value
adapters, per-client layer allocation, masked aggregation and analytic cost
estimates.
"""
from .config import ExperimentConfig, parse_config
from .federation import run_experiment
from .harness import run_grid

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "parse_config", "run_experiment", "run_grid", "__version__"]
