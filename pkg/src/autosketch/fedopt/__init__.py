"""Federated averaging harness with private, compressed mean estimation."""

from .estimators import (
    ESTIMATORS,
    AdaptNormMean,
    AdaptTailMean,
    ExactMean,
    FixedSketchMean,
    FlConfig,
    GaussianMean,
    MeanEstimator,
    RoundEstimate,
    TwoStageMean,
    geometry,
    make_estimator,
    tail_update,
)
from .harness import DivergenceError, FlResult, RoundLog, fedavg_run, local_update, two_stage_fl
from .tasks import KINDS, Task, load_task, make_linear_task, make_logistic_task, save_task

__all__ = [
    "ESTIMATORS", "KINDS", "AdaptNormMean", "AdaptTailMean", "DivergenceError", "ExactMean",
    "FixedSketchMean", "FlConfig", "FlResult", "GaussianMean", "MeanEstimator", "RoundEstimate",
    "RoundLog", "Task", "TwoStageMean", "fedavg_run", "geometry", "load_task", "local_update",
    "make_estimator", "make_linear_task", "make_logistic_task", "save_task", "tail_update",
    "two_stage_fl",
]
