"""Benchmark harness: metrics, orchestration, sweeps, and the CLI."""

from .config import ExperimentConfig, default_config, load_config  # noqa: F401
from .experiment import execute_run, run_experiment  # noqa: F401
from .sweep import run_sweep, write_sweep_artifacts  # noqa: F401
