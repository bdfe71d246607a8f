"""Experiment registry, JSON configs and the command-line entry point."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .experiments import EXPERIMENTS, run_experiment

__all__ = ["ConfigError", "EXPERIMENTS", "ExperimentConfig", "load_config", "parse_config",
           "run_experiment"]
