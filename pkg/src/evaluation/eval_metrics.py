# This file is part of the UrbanVerse tool

# src/evaluation/eval_metrics.py
import logging
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.integrate import trapezoid
from sklearn.metrics import mean_absolute_error, mean_squared_error, r2_score

from common.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

DEFAULT_GRID_POINTS = 2048


@dataclass
class MetricReport:
    task_id: str
    mae: float
    rmse: float
    r2: float
    n: int

    def to_dict(self):
        return asdict(self)

    def __str__(self):
        return f"task {self.task_id}: MAE={self.mae:.4f} RMSE={self.rmse:.4f} R2={self.r2:.4f} (n={self.n})"


def metrics(pred, truth, task_id="0"):
    """MAE, RMSE and R^2; R^2 is NaN (with a warning) when truth has zero variance"""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if len(pred) != len(truth):
        raise DataError(f"task {task_id}: {len(pred)} predictions for {len(truth)} targets")
    if len(truth) < 2:
        raise DataError(f"task {task_id}: metrics need at least 2 regions, got {len(truth)}")
    mae = mean_absolute_error(truth, pred)
    rmse = float(np.sqrt(mean_squared_error(truth, pred)))
    if np.all(truth == truth[0]):
        logger.warning(f"Task {task_id}: ground truth has zero variance, R2 is undefined")
        r2 = float("nan")
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            r2 = float(r2_score(truth, pred))
    return MetricReport(task_id=str(task_id), mae=float(mae), rmse=rmse, r2=r2, n=len(truth))


@dataclass
class DensityCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def integral(self):
        return float(trapezoid(self.density, self.grid))


def epanechnikov(x):
    return np.where(np.abs(x) <= 1, 0.75 * (1 - x ** 2), 0.0)


def silverman_bandwidth(samples):
    """b = 1.06 * std * n^(-1/5), with a small positive fallback for degenerate samples"""
    samples = np.asarray(samples, dtype=np.float64)
    sigma = float(np.std(samples, ddof=1)) if len(samples) > 1 else 0.0
    if sigma > 0:
        return 1.06 * sigma * len(samples) ** (-0.2)
    fallback = 1e-3 * max(1.0, float(np.max(np.abs(samples))))
    logger.warning(f"Samples have zero spread, KDE bandwidth falls back to {fallback:.3g}")
    return fallback


def default_grid(samples, bandwidth, num=DEFAULT_GRID_POINTS):
    samples = np.asarray(samples, dtype=np.float64)
    return np.linspace(samples.min() - bandwidth, samples.max() + bandwidth, num)


def kde(samples, bandwidth=None, grid=None):
    """f(y) = 1/(n b) sum K((y - s) / b) with the Epanechnikov kernel"""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if len(samples) == 0:
        raise DataError("KDE needs at least one sample")
    bandwidth = silverman_bandwidth(samples) if bandwidth is None else float(bandwidth)
    if not bandwidth > 0:
        raise ConfigError(f"KDE bandwidth must be positive, got {bandwidth}")
    grid = default_grid(samples, bandwidth) if grid is None else np.asarray(grid, dtype=np.float64)
    u = (grid[:, None] - samples[None, :]) / bandwidth
    density = epanechnikov(u).sum(axis=1) / (len(samples) * bandwidth)
    return DensityCurve(grid=grid, density=density, bandwidth=bandwidth)


def quantile_coverage(samples, truth, lower=0.025, upper=0.975):
    """Fraction of rows whose truth lies inside the [lower, upper] sample quantile band"""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    lo = np.quantile(samples, lower, axis=1)
    hi = np.quantile(samples, upper, axis=1)
    return float(np.mean((truth >= lo) & (truth <= hi)))
