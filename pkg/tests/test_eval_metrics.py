# This file is part of the UrbanVerse tool

# tests/test_eval_metrics.py
import logging
import os

import numpy as np
import pytest

from common.errors import ConfigError, DataError
from evaluation.eval_metrics import (
    epanechnikov, kde, metrics, quantile_coverage, silverman_bandwidth,
)
from visualization.density_plot import plot_density


def test_metrics_on_known_values():
    report = metrics([1.0, 2.0, 4.0], [1.0, 3.0, 3.0], task_id="pop")
    assert report.mae == pytest.approx(2.0 / 3.0)
    assert report.rmse == pytest.approx(np.sqrt(2.0 / 3.0))
    # SS_res = 2, SS_tot = 8/3
    assert report.r2 == pytest.approx(1.0 - 2.0 / (8.0 / 3.0))
    assert report.n == 3
    assert report.to_dict()["task_id"] == "pop"
    assert "R2=" in str(report)


def test_metrics_hand_computed_example():
    report = metrics([0.0, 0.0, 2.0], [0.0, 1.0, 2.0])
    assert report.mae == pytest.approx(1.0 / 3.0)
    assert report.rmse == pytest.approx(np.sqrt(1.0 / 3.0))
    assert report.r2 == pytest.approx(0.5)


def test_mae_never_exceeds_rmse():
    rng = np.random.default_rng(1)
    for _ in range(20):
        truth, pred = rng.normal(size=12), rng.normal(size=12)
        report = metrics(pred, truth)
        assert report.mae <= report.rmse + 1e-12
        assert report.r2 <= 1.0


def test_perfect_and_mean_predictions():
    truth = np.array([1.0, 5.0, 2.0, 8.0])
    assert metrics(truth, truth).r2 == pytest.approx(1.0)
    assert metrics(np.full(4, truth.mean()), truth).r2 == pytest.approx(0.0)


def test_constant_truth_has_undefined_r2(caplog):
    with caplog.at_level(logging.WARNING):
        report = metrics([1.0, 2.0], [3.0, 3.0], task_id="flat")
    assert np.isnan(report.r2)
    assert report.mae == pytest.approx(1.5)
    assert "zero variance" in caplog.text


def test_metrics_input_errors():
    with pytest.raises(DataError):
        metrics([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(DataError, match="at least 2"):
        metrics([1.0], [1.0])


def test_epanechnikov_kernel():
    x = np.array([-1.5, -1.0, 0.0, 0.5, 1.0, 2.0])
    assert np.allclose(epanechnikov(x), [0.0, 0.0, 0.75, 0.5625, 0.0, 0.0])


def test_silverman_bandwidth():
    samples = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
    assert silverman_bandwidth(samples) == pytest.approx(1.06 * np.std(samples, ddof=1) * 5 ** -0.2)
    assert silverman_bandwidth(np.full(10, 7.0)) == pytest.approx(7e-3)


@pytest.mark.parametrize("n", [1, 10, 500])
def test_kde_integrates_to_one(n):
    samples = np.random.default_rng(n).normal(3.0, 2.0, size=n)
    curve = kde(samples)
    assert curve.integral() == pytest.approx(1.0, abs=1e-3)
    assert np.all(curve.density >= 0.0)


def test_kde_with_fixed_bandwidth_and_grid():
    assert kde([4.0], bandwidth=0.5, grid=np.array([4.0])).density[0] == pytest.approx(0.75 / 0.5)
    curve = kde([0.0], bandwidth=2.0, grid=np.array([-3.0, -1.0, 0.0, 1.0, 3.0]))
    assert np.allclose(curve.density, [0.0, 0.28125, 0.375, 0.28125, 0.0])
    with pytest.raises(ConfigError):
        kde([0.0, 1.0], bandwidth=0.0)
    with pytest.raises(DataError):
        kde([])


def test_quantile_coverage():
    samples = np.tile(np.linspace(0.0, 1.0, 101), (4, 1))
    assert quantile_coverage(samples, [0.5, 0.01, 0.99, 0.5]) == pytest.approx(0.5)
    assert quantile_coverage(samples, [0.5, 0.5, 0.5, 2.0]) == pytest.approx(0.75)


def test_plot_density_writes_a_figure(tmp_path):
    samples = np.random.default_rng(0).normal(size=50)
    path = plot_density(kde(samples), samples, truth=0.2, title="region 3 / pop", path=str(tmp_path / "d.svg"))
    assert os.path.getsize(path) > 0
