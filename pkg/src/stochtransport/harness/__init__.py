"""Configuration, experiment orchestration and reporting."""

from .config import ExperimentConfig, load_config, parse_config, dump_config
from .experiments import PIPELINES
from .report import RunManifest, emit_report, run_experiment
