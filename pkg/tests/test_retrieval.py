# This file is part of the UrbanVerse tool

# tests/test_retrieval.py
import logging

import numpy as np
import pytest

from common.errors import ConfigError, DataError
from urban_models.numerics import Rng
from urban_models.retrieval import build_repository, prior_matrix, retrieve_prior


def brute_force_prior(q, embeddings, targets, K, skip=None):
    sims = np.array([e @ q / (np.linalg.norm(e) * np.linalg.norm(q)) for e in embeddings])
    rows = [r for r in np.argsort(-sims, kind="stable") if r != skip and not np.isnan(targets[r])][:K]
    w = np.exp(sims[rows] - sims[rows].max())
    w /= w.sum()
    return float(w @ targets[rows]), rows


@pytest.fixture
def repo_data():
    rng = np.random.default_rng(42)
    E = rng.normal(size=(500, 8))
    Y = np.column_stack([rng.normal(3.0, 2.0, size=500), rng.exponential(5.0, size=500)])
    Y[::7, 1] = np.nan
    return E, Y


def test_targets_are_z_scored_per_task(repo_data):
    E, Y = repo_data
    repo = build_repository(range(500), E, Y, ["a", "b"])
    assert np.nanmean(repo.targets, axis=0) == pytest.approx([0.0, 0.0], abs=1e-9)
    assert np.nanstd(repo.targets, axis=0) == pytest.approx([1.0, 1.0])
    assert repo.denormalize(repo.targets[3, 0], "a") == pytest.approx(Y[3, 0])
    assert np.isnan(repo.targets[0, 1])


def test_prior_matrix_matches_brute_force(repo_data):
    E, Y = repo_data
    repo = build_repository(range(500), E, Y, ["a", "b"])
    Q = np.random.default_rng(7).normal(size=(200, 8))
    values, neighbors, _ = prior_matrix(Q, repo, K=5)
    for i in range(200):
        for u in range(2):
            expected, rows = brute_force_prior(Q[i], E, repo.targets[:, u], 5)
            assert values[i, u] == pytest.approx(expected, abs=1e-9)
            assert list(neighbors[i][u]) == rows


def test_single_query_agrees_with_the_matrix(repo_data):
    E, Y = repo_data
    repo = build_repository([f"X/{i}" for i in range(500)], E, Y, ["a", "b"])
    q = E[10] + 0.1
    prior = retrieve_prior(q, "b", repo, K=4)
    values, _, weights = prior_matrix(q, repo, K=4)
    assert prior.value == pytest.approx(values[0, 1])
    assert prior.weights == pytest.approx(weights[0][1])
    assert prior.weights.sum() == pytest.approx(1.0)
    assert all(n.startswith("X/") for n in prior.neighbors)


def test_self_exclusion(repo_data):
    E, Y = repo_data
    repo = build_repository([f"X/{i}" for i in range(500)], E, Y, ["a", "b"])
    assert retrieve_prior(E[3], "a", repo, K=1).neighbors == ["X/3"]
    assert "X/3" not in retrieve_prior(E[3], "a", repo, K=5, exclude="X/3").neighbors
    _, neighbors, _ = prior_matrix(E[:4], repo, K=3, exclude_rows=np.arange(4))
    for i in range(4):
        assert i not in neighbors[i][0]


def test_k_is_clamped_to_the_pool(caplog):
    repo = build_repository([0, 1, 2], np.eye(3), [[1.0], [2.0], [4.0]], ["a"])
    with caplog.at_level(logging.WARNING):
        prior = retrieve_prior(np.ones(3), "a", repo, K=5)
    assert len(prior.neighbors) == 3
    assert prior.value == pytest.approx(0.0, abs=1e-9)
    assert "clamped" in caplog.text


def test_query_and_parameter_errors(repo_data):
    E, Y = repo_data
    repo = build_repository(range(500), E, Y, ["a", "b"])
    with pytest.raises(DataError, match="zero norm"):
        retrieve_prior(np.zeros(8), "a", repo)
    with pytest.raises(DataError):
        retrieve_prior(np.full(8, np.nan), "a", repo)
    with pytest.raises(ConfigError):
        retrieve_prior(E[0], "a", repo, K=0)
    with pytest.raises(ConfigError):
        prior_matrix(E[:2], repo, mode="random")
    with pytest.raises(DataError, match="unknown task"):
        retrieve_prior(E[0], "c", repo)


def test_random_retrieval_is_seeded(repo_data):
    E, Y = repo_data
    repo = build_repository(range(500), E, Y, ["a", "b"])
    a, _, _ = prior_matrix(E[:10], repo, K=5, mode="random", rng=Rng(3, ("random-retrieval",)))
    b, _, _ = prior_matrix(E[:10], repo, K=5, mode="random", rng=Rng(3, ("random-retrieval",)))
    top, _, _ = prior_matrix(E[:10], repo, K=5)
    assert np.array_equal(a, b)
    assert not np.allclose(a, top)


def test_random_retrieval_weights_are_a_softmax_over_similarities(repo_data):
    E, Y = repo_data
    repo = build_repository(range(500), E, Y, ["a", "b"])
    q = E[3] + 0.2
    prior = retrieve_prior(q, "a", repo, K=6, mode="random", rng=Rng(8, ("random-retrieval",)))
    rows = [int(r) for r in prior.neighbors]
    sims = np.array([E[r] @ q / (np.linalg.norm(E[r]) * np.linalg.norm(q)) for r in rows])
    expected = np.exp(sims - sims.max())
    expected /= expected.sum()
    assert np.allclose(prior.weights, expected, atol=1e-12)
    assert not np.allclose(prior.weights, np.full(6, 1.0 / 6.0))
    assert prior.value == pytest.approx(float(expected @ repo.targets[rows, 0]), abs=1e-12)


def test_degenerate_task_needs_the_flag():
    E = np.random.default_rng(0).normal(size=(4, 3))
    Y = np.array([[1.0, 2.0], [1.0, 3.0], [1.0, 5.0], [1.0, 7.0]])
    with pytest.raises(DataError, match="zero variance"):
        build_repository(range(4), E, Y, ["flat", "ok"])
    repo = build_repository(range(4), E, Y, ["flat", "ok"], allow_degenerate=True)
    assert repo.std[0] == 1.0
    assert np.allclose(repo.targets[:, 0], 0.0)


def test_task_without_targets_is_rejected():
    with pytest.raises(DataError, match="no training targets"):
        build_repository(range(3), np.eye(3), [[np.nan], [np.nan], [np.nan]], ["empty"])


def test_add_task_appends_a_normalised_column(repo_data):
    E, Y = repo_data
    repo = build_repository(range(500), E, Y[:, :1], ["a"])
    u = repo.add_task("b", Y[:, 1])
    assert u == 1 and repo.task_ids == ["a", "b"]
    assert np.nanmean(repo.targets[:, 1]) == pytest.approx(0.0, abs=1e-9)
    assert repo.denormalize(0.0, "b") == pytest.approx(np.nanmean(Y[:, 1]))
    assert np.isfinite(retrieve_prior(E[0], "b", repo).value)
