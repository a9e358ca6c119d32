"""Validation-driven adaptive pooling for multivariate time-series forecasting.

Trains one pooled forecaster plus cluster prototypes, reassigns series by
out-of-sample predictive loss, guards specialization with a leakage-free
fallback to the pooled model, selects the number of clusters by a penalized
validation criterion, and produces robust point and calibrated probabilistic
forecasts.
"""

import os as _os

# honor the thread-count override before numpy spins up its BLAS pool
_threads = _os.environ.get("POOLCAST_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .data import (AccessAudit, DataError, MtsDataset, PreparedData,
                   SplitSpec, Standardizer, enumerate_windows,
                   fit_impute_standardize, load_dataset, load_pems, prepare,
                   save_csv, save_packed, split)
from .losses import (MetricRow, MetricTable, empirical_quantile, huber,
                     interval_stats, mae, mse, multi_pinball, pinball,
                     split_mean_loss)
from .model import (ParamSet, QuantilePrediction, TrainConfig,
                    TrainingDiverged, forward_point, forward_quantiles,
                    init_params, load_checkpoint, loss_and_gradients,
                    rollout, save_checkpoint, train)

__version__ = "0.1.0"

__all__ = [
    "AccessAudit", "DataError", "MtsDataset", "PreparedData", "SplitSpec",
    "Standardizer", "enumerate_windows", "fit_impute_standardize",
    "load_dataset", "load_pems", "prepare", "save_csv", "save_packed", "split",
    "MetricRow", "MetricTable", "empirical_quantile", "huber",
    "interval_stats", "mae", "mse", "multi_pinball", "pinball",
    "split_mean_loss",
    "ParamSet", "QuantilePrediction", "TrainConfig", "TrainingDiverged",
    "forward_point", "forward_quantiles", "init_params", "load_checkpoint",
    "loss_and_gradients", "rollout", "save_checkpoint", "train",
]
