"""AUC, Welch tests, the repeated-split experiment harness and reports."""

from .metrics import MetricError, auc_roc
from .stats import StatsError, WelchResult, betainc, welch_t_test
from .experiment import (
    VARIANTS,
    Components,
    ExperimentConfig,
    parse_variant,
    run_experiments,
    run_single,
    split_tensors,
)
from .report import Report, format_mean_std, load_metrics, report, save_metrics

__all__ = [name for name in dir() if not name.startswith("_")]
