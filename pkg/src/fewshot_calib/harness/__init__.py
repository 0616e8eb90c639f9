"""Experiment driver: configs, paired ablation and shot sweeps, run artifacts, CLI."""

from .aggregate import Aggregate, aggregate, paired
from .config import RunConfig, build_config, load_config
from .suite import ReplayMismatch, execute, prepare, replay, run_ablation_suite, run_shot_sweep

__all__ = [
    "Aggregate",
    "ReplayMismatch",
    "RunConfig",
    "aggregate",
    "build_config",
    "execute",
    "load_config",
    "paired",
    "prepare",
    "replay",
    "run_ablation_suite",
    "run_shot_sweep",
]
