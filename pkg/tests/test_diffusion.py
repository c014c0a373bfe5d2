# This file is part of the UrbanVerse tool

# tests/test_diffusion.py
import numpy as np
import pytest
import torch

from common.errors import ConfigError
from ddpm_reference import VanillaDDPM
from urban_models.diffusion import (
    forward_sample, forward_sample_batch, forward_step, make_schedule, posterior_coeffs, posterior_mean,
    reparameterize_y0, reverse_diffusion,
)


@pytest.fixture
def schedule():
    return make_schedule(100, 1e-4, 0.02)


def test_schedule_tables(schedule):
    assert schedule.betas[0] == 0.0 and schedule.alphas_bar[0] == 1.0
    assert schedule.betas[1] == pytest.approx(1e-4)
    assert schedule.betas[100] == pytest.approx(0.02)
    assert np.all(np.diff(schedule.alphas_bar) < 0)
    assert schedule.alphas_bar[100] == pytest.approx(np.prod(1.0 - np.linspace(1e-4, 0.02, 100)), rel=1e-12)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_validation(args):
    with pytest.raises(ConfigError):
        make_schedule(*args)


def test_timestep_range_is_checked(schedule):
    with pytest.raises(ConfigError):
        posterior_coeffs(schedule, 1)
    with pytest.raises(ConfigError):
        forward_sample(0.0, 0.0, 101, 0.0, schedule)


def test_posterior_coefficients(schedule):
    for t in range(2, schedule.T + 1):
        g0, g1, g2, beta_tilde = posterior_coeffs(schedule, t)
        assert abs(g0 + g1 + g2 - 1.0) <= 1e-10, t
        abar, abar_prev = schedule.alphas_bar[t], schedule.alphas_bar[t - 1]
        assert abs(beta_tilde - (1.0 - abar_prev) / (1.0 - abar) * schedule.betas[t]) <= 1e-10, t
        assert 0.0 < beta_tilde < schedule.betas[t]


@pytest.mark.parametrize("t", [2, 40, 100])
def test_zero_prior_reduces_to_ddpm(schedule, t):
    ref = VanillaDDPM(100, 1e-4, 0.02)
    y0, y_t, eps = 1.3, -0.4, 0.7
    assert forward_sample(y0, 0.0, t, eps, schedule) == pytest.approx(ref.q_sample(y0, t, eps))
    mean, var = ref.posterior(y0, y_t, t)
    assert posterior_mean(y0, y_t, 0.0, t, schedule) == pytest.approx(mean)
    assert posterior_coeffs(schedule, t)[3] == pytest.approx(var)
    assert reparameterize_y0(y_t, 0.0, eps, t, schedule) == pytest.approx(ref.predict_y0(y_t, t, eps))


def test_reparameterization_inverts_the_forward_marginal(schedule):
    y0, prior, eps = np.array([2.0, -1.0, 0.5]), np.array([1.0, 0.0, -3.0]), np.array([0.3, -1.2, 0.0])
    for t in (1, 10, 100):
        y_t = forward_sample(y0, prior, t, eps, schedule)
        assert np.allclose(reparameterize_y0(y_t, prior, eps, t, schedule), y0, rtol=0.0, atol=1e-10)


def test_batched_forward_matches_scalar(schedule, float64):
    y0 = torch.tensor([[0.5], [1.5], [-2.0]])
    prior = torch.tensor([[1.0], [0.0], [2.0]])
    eps = torch.tensor([[0.1], [-0.3], [0.8]])
    t = torch.tensor([[1], [50], [100]])
    batch = forward_sample_batch(y0, prior, t, eps, schedule)
    for i, ti in enumerate([1, 50, 100]):
        assert float(batch[i, 0]) == pytest.approx(float(forward_sample(y0[i, 0], prior[i, 0], ti, eps[i, 0],
                                                                        schedule)))


def within_standard_errors(y, mean, var, k=3.0):
    """Sample mean and variance of y agree with (mean, var) to k standard errors"""
    n = len(y)
    assert abs(y.mean() - mean) <= k * np.sqrt(var / n), (y.mean(), mean)
    assert abs(y.var(ddof=1) - var) <= k * var * np.sqrt(2.0 / (n - 1)), (y.var(ddof=1), var)


def marginal(schedule, y0, prior, t):
    abar = schedule.alphas_bar[t]
    return np.sqrt(abar) * y0 + (1.0 - np.sqrt(abar)) * prior, 1.0 - abar


def test_iterated_steps_match_the_closed_form_marginal(schedule):
    rng = np.random.default_rng(0)
    n, y0, prior = 100_000, 2.0, -1.0
    y = np.full(n, y0)
    for t in range(1, schedule.T + 1):
        y = forward_step(y, prior, t, rng.standard_normal(n), schedule)
        if t in (1, 50, 100):
            within_standard_errors(y, *marginal(schedule, y0, prior, t))


@pytest.mark.parametrize("t", [2, 50, 100])
def test_posterior_step_lands_on_the_previous_marginal(schedule, t):
    rng = np.random.default_rng(t)
    n, y0, prior = 100_000, 2.0, -1.0
    y_t = forward_sample(y0, prior, t, rng.standard_normal(n), schedule)
    beta_tilde = posterior_coeffs(schedule, t)[3]
    y_prev = posterior_mean(y0, y_t, prior, t, schedule) + np.sqrt(beta_tilde) * rng.standard_normal(n)
    within_standard_errors(y_prev, *marginal(schedule, y0, prior, t - 1))


def test_reverse_sampling_matches_ddpm_with_zero_prior(schedule, float64):
    ref = VanillaDDPM(100, 1e-4, 0.02)

    def eps_model(y, t):
        return 0.3 * y * t / 100.0

    ours = reverse_diffusion(eps_model, torch.zeros(8, 1), schedule, torch.Generator().manual_seed(7))
    theirs = ref.sample(eps_model, (8, 1), torch.Generator().manual_seed(7))
    assert torch.allclose(ours, theirs, atol=1e-10)


def test_reverse_trajectory_and_prior_centering(schedule, float64):
    prior = torch.full((4000, 1), 5.0)
    y0, path = reverse_diffusion(lambda y, t: torch.zeros_like(y), prior, schedule,
                                 torch.Generator().manual_seed(1), trajectory=True)
    assert len(path) == schedule.T + 1
    assert path[0].shape == prior.shape
    # a zero noise model leaves the chain centred on the prior
    assert float(y0.mean()) == pytest.approx(5.0, abs=0.1)
