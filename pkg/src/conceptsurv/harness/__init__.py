"""Experiment orchestration, persistence, reporting and the command line."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .experiment import ExperimentResult, MetricsRow, run_experiment
from .reports import export_reports

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ExperimentConfig",
    "ExperimentResult",
    "MetricsRow",
    "export_reports",
    "load_checkpoint",
    "load_config",
    "run_experiment",
    "save_checkpoint",
]
