"""Experiment layer: synthetic data, toy training, sweeps, IMP, pass accounting and reports."""

from .data import Dataset, gen_synthetic
from .experiments import ExperimentConfig, imp_toy, pass_count, run_sweep
from .report import emit, load
from .training import Hyperparams, train

__all__ = ["Dataset", "gen_synthetic", "ExperimentConfig", "run_sweep", "imp_toy", "pass_count", "emit", "load",
           "Hyperparams", "train"]
