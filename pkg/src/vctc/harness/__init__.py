"""Experiment harness: synthetic data, training, evaluation, reporting, CLI."""

from .data import ConfigError, Dataset, SyntheticTaskSpec, generate_dataset, load_dataset, save_dataset
from .evaluation import EvalReport, evaluate_model, evaluate_posteriors
from .reporting import GapSummary, RunCurve, convergence_report, load_metrics, render_convergence_figures
from .training import (
    TrainConfig,
    TrainData,
    TrainingDivergedError,
    TrainResult,
    learning_rate_at,
    load_train_checkpoint,
    train,
)

__all__ = [
    "ConfigError",
    "Dataset",
    "EvalReport",
    "GapSummary",
    "RunCurve",
    "SyntheticTaskSpec",
    "TrainConfig",
    "TrainData",
    "TrainResult",
    "TrainingDivergedError",
    "convergence_report",
    "evaluate_model",
    "evaluate_posteriors",
    "generate_dataset",
    "learning_rate_at",
    "load_dataset",
    "load_metrics",
    "load_train_checkpoint",
    "render_convergence_figures",
    "save_dataset",
    "train",
]
