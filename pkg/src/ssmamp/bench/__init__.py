"""Experiment harness, instance files and command line."""
from .config import DEFAULT_SWEEP, ConfigError, ExperimentConfig
from .harness import RunReport, experiment, generate

__all__ = ["DEFAULT_SWEEP", "ConfigError", "ExperimentConfig", "RunReport", "experiment",
           "generate"]
