"""Experiment orchestration: configuration, runs, resource accounting, reports."""
from .config import ConfigError, DataSpec, ExperimentConfig, toy_preset
from .report import render_report
from .resources import ResourceReport, record_resources
from .run import RunFailed, reevaluate, run_crosseval, run_experiment

__all__ = [
    "ConfigError", "DataSpec", "ExperimentConfig", "toy_preset", "render_report", "ResourceReport",
    "record_resources", "RunFailed", "reevaluate", "run_crosseval", "run_experiment",
]
