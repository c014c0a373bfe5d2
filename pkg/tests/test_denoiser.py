# This file is part of the UrbanVerse tool

# tests/test_denoiser.py
import pytest
import torch

from common.errors import ConfigError, DataError
from urban_models.denoiser import TaskConditionedDenoiser
from urban_models.numerics import Rng, finite_difference_error, trainable_parameters


def randomize_head(model, seed=0):
    with torch.no_grad():
        weight = model.head_out.weight
        weight.copy_(torch.randn(weight.shape, generator=torch.Generator().manual_seed(seed)))


def batch(n=5, d=6, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, d, generator=g), torch.randn(n, generator=g)


@pytest.mark.parametrize("mode", ["em", "concat", "xattn"])
def test_output_shape_and_zero_initial_prediction(mode):
    model = TaskConditionedDenoiser(6, num_tasks=3, num_steps=10, hidden=8, mode=mode, seed=0)
    h, y = batch()
    out = model(h, y, torch.tensor([1, 2, 3, 4, 10]), 2)
    assert out.shape == (5,)
    assert torch.all(out == 0.0)


def test_unknown_mode_and_ids_are_rejected():
    with pytest.raises(ConfigError):
        TaskConditionedDenoiser(6, 2, 10, mode="film")
    model = TaskConditionedDenoiser(6, 2, 10, hidden=8)
    h, y = batch()
    with pytest.raises(DataError):
        model(h, y, 1, 2)
    with pytest.raises(ConfigError):
        model(h, y, 11, 0)


def test_unit_modulation_is_the_unconditioned_trunk():
    model = TaskConditionedDenoiser(6, 2, 10, hidden=8, mode="em", seed=1)
    randomize_head(model, 0)
    h, y = batch()
    conditioned = model(h, y, 3, 0, gamma=torch.ones(5, 8))
    plain = model.head_out(torch.nn.functional.softplus(model.head_hidden(model.features(h, y))))
    assert torch.allclose(conditioned, plain.squeeze(-1))


def test_task_and_time_change_the_output():
    model = TaskConditionedDenoiser(6, 2, 10, hidden=8, mode="em", seed=1)
    randomize_head(model, 0)
    h, y = batch()
    assert not torch.allclose(model(h, y, 3, 0), model(h, y, 3, 1))
    assert not torch.allclose(model(h, y, 3, 0), model(h, y, 9, 0))


@pytest.mark.parametrize("mode", ["em", "concat", "xattn"])
def test_gradients_match_finite_differences(mode, float64):
    model = TaskConditionedDenoiser(8, 2, 10, hidden=16, mode=mode, seed=2)
    randomize_head(model, 1)
    h, y = batch(n=4, d=8, seed=3)
    h, y = h.double(), y.double()
    t = torch.tensor([1, 4, 7, 10])
    u = torch.tensor([0, 1, 1, 0])
    target = torch.linspace(-1.0, 1.0, 4, dtype=torch.float64)
    error = finite_difference_error(lambda: ((model(h, y, t, u) - target) ** 2).mean(),
                                    trainable_parameters(model), max_entries_per_tensor=5, rng=Rng(4))
    assert error < 1e-4


def test_init_is_seeded():
    a = TaskConditionedDenoiser(6, 2, 10, hidden=8, seed=9)
    b = TaskConditionedDenoiser(6, 2, 10, hidden=8, seed=9)
    for name, value in a.state_dict().items():
        assert torch.equal(value, b.state_dict()[name]), name


def test_add_task_keeps_existing_rows():
    model = TaskConditionedDenoiser(6, 2, 10, hidden=8, seed=0)
    before = model.task_embedding.weight.detach().clone()
    assert model.add_task() == 2
    assert model.num_tasks == 3
    assert torch.equal(model.task_embedding.weight[:2], before)
    h, y = batch()
    assert model(h, y, 1, 2).shape == (5,)


def test_config_round_trip():
    model = TaskConditionedDenoiser(6, 3, 10, hidden=8, mode="xattn", seed=4)
    clone = TaskConditionedDenoiser.from_config_dict(model.config_dict())
    assert clone.config_dict() == model.config_dict()
    assert set(clone.state_dict()) == set(model.state_dict())
