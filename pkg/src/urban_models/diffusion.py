# This file is part of the UrbanVerse tool

# src/urban_models/diffusion.py
"""
Prior-shifted diffusion over a scalar target.

Forward:  y_t = sqrt(abar_t) y_0 + sqrt(1 - abar_t) eps + (1 - sqrt(abar_t)) y_prior
Reverse:  y_{t-1} = g0 * y0_hat + g1 * y_t + g2 * y_prior + sqrt(beta_tilde_t) * v

With y_prior = 0 every formula reduces to the standard DDPM one.
All schedule tables are indexed 0..T with the t = 0 entry being
(beta = 0, alpha = 1, abar = 1).
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from common.errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass
class DiffusionSchedule:
    T: int
    betas: np.ndarray  # (T+1,)
    alphas: np.ndarray
    alphas_bar: np.ndarray

    def check_t(self, t, low=1):
        if not low <= int(t) <= self.T:
            raise ConfigError(f"timestep {t} outside [{low}, {self.T}]")
        return int(t)

    def __str__(self):
        return (f"DiffusionSchedule T={self.T}, beta {self.betas[1]:.2e}..{self.betas[self.T]:.2e}, "
                f"abar_T={self.alphas_bar[self.T]:.4f}")


def make_schedule(T=100, beta_1=1e-4, beta_T=0.02):
    """Linear beta schedule from beta_1 to beta_T inclusive"""
    if int(T) != T or T < 1:
        raise ConfigError(f"number of timesteps must be a positive integer, got {T}")
    if not 0.0 < beta_1 <= beta_T < 1.0:
        raise ConfigError(f"need 0 < beta_1 <= beta_T < 1, got beta_1={beta_1}, beta_T={beta_T}")
    T = int(T)
    betas = np.zeros(T + 1, dtype=np.float64)
    betas[1:] = np.linspace(beta_1, beta_T, T)
    alphas = 1.0 - betas
    alphas_bar = np.cumprod(alphas)
    return DiffusionSchedule(T=T, betas=betas, alphas=alphas, alphas_bar=alphas_bar)


def posterior_coeffs(schedule, t):
    """(g0, g1, g2, beta_tilde) of q(y_{t-1} | y_t, y_0, y_prior) for 2 <= t <= T"""
    t = schedule.check_t(t, low=2)
    beta, alpha = schedule.betas[t], schedule.alphas[t]
    abar, abar_prev = schedule.alphas_bar[t], schedule.alphas_bar[t - 1]
    denom = 1.0 - abar
    g0 = beta * np.sqrt(abar_prev) / denom
    g1 = (1.0 - abar_prev) * np.sqrt(alpha) / denom
    g2 = 1.0 + (np.sqrt(abar) - 1.0) * (np.sqrt(alpha) + np.sqrt(abar_prev)) / denom
    beta_tilde = (1.0 - abar_prev) * beta / denom
    return float(g0), float(g1), float(g2), float(beta_tilde)


def forward_sample(y0, prior, t, eps, schedule):
    """Closed-form marginal q(y_t | y_0, y_prior); works on floats, numpy arrays and tensors"""
    t = schedule.check_t(t)
    abar = float(schedule.alphas_bar[t])
    return math.sqrt(abar) * y0 + math.sqrt(1.0 - abar) * eps + (1.0 - math.sqrt(abar)) * prior


def forward_sample_batch(y0, prior, t, eps, schedule):
    """forward_sample with a per-element timestep tensor t"""
    abar = torch.as_tensor(schedule.alphas_bar, dtype=y0.dtype)[t]
    return abar.sqrt() * y0 + (1.0 - abar).sqrt() * eps + (1.0 - abar.sqrt()) * prior


def forward_step(y_prev, prior, t, eps, schedule):
    """Single transition q(y_t | y_{t-1}, y_prior)"""
    t = schedule.check_t(t)
    alpha = float(schedule.alphas[t])
    return math.sqrt(alpha) * y_prev + (1.0 - math.sqrt(alpha)) * prior + math.sqrt(schedule.betas[t]) * eps


def reparameterize_y0(y_t, prior, eps_hat, t, schedule):
    """y0_hat = (y_t - (1 - sqrt(abar_t)) y_prior - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)"""
    t = schedule.check_t(t)
    abar = float(schedule.alphas_bar[t])
    return (y_t - (1.0 - math.sqrt(abar)) * prior - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)


def posterior_mean(y0, y_t, prior, t, schedule):
    g0, g1, g2, _ = posterior_coeffs(schedule, t)
    return g0 * y0 + g1 * y_t + g2 * prior


def reverse_diffusion(eps_model, prior, schedule, generator, trajectory=False):
    """
    Ancestral sampling from N(prior, 1) down to y_0.

    eps_model(y_t, t) returns the predicted noise for the batch. Noise is
    drawn from generator in the order y_T, then one draw per t = T..2.
    """
    prior = torch.as_tensor(prior, dtype=torch.get_default_dtype())
    y_t = prior + torch.randn(prior.shape, generator=generator, dtype=prior.dtype)
    path = [y_t]
    for t in range(schedule.T, 0, -1):
        eps_hat = eps_model(y_t, t)
        y0_hat = reparameterize_y0(y_t, prior, eps_hat, t, schedule)
        if t > 1:
            g0, g1, g2, beta_tilde = posterior_coeffs(schedule, t)
            v = torch.randn(prior.shape, generator=generator, dtype=prior.dtype)
            y_t = g0 * y0_hat + g1 * y_t + g2 * prior + math.sqrt(beta_tilde) * v
        else:
            y_t = y0_hat
        if trajectory:
            path.append(y_t)
    return (y_t, path) if trajectory else y_t
