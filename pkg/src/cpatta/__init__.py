"""Conformal-prediction-guided active test-time adaptation on feature streams."""

from .config import ConfigError, RunConfig, load_config
from .harness import BatchRecord, RunSummary, coverage_gap, efficiency, emit, run, run_all

__all__ = [
    "BatchRecord",
    "ConfigError",
    "RunConfig",
    "RunSummary",
    "coverage_gap",
    "efficiency",
    "emit",
    "load_config",
    "run",
    "run_all",
]

__version__ = "0.1.0"
