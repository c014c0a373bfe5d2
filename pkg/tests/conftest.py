# This file is part of the UrbanVerse tool

# tests/conftest.py
import os
import sys

import numpy as np
import pandas as pd
import pytest
import torch

sys.path.append(os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src"))
from data_processing.city_io import City  # noqa: E402
from data_processing.grid import NUM_POI_CATEGORIES, build_hex_grid  # noqa: E402
from data_processing.synthetic_city import SyntheticCitySpec, TaskSpec, tile_regions  # noqa: E402
from execution.run_config import RunConfig  # noqa: E402
from urban_models.numerics import Rng, set_precision  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance check, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def default_precision():
    set_precision(32)
    yield
    set_precision(32)


@pytest.fixture
def float64():
    set_precision(64)
    yield torch.float64
    set_precision(32)


@pytest.fixture
def tiny_cells():
    """About 60 hexagons over 1.2 km x 1.2 km with seeded POI counts"""
    cells = build_hex_grid((0.0, 0.0, 1200.0, 1200.0), edge_m=150.0)
    counts = Rng(11, ("tiny-poi",)).np.poisson(2.0, size=(len(cells), NUM_POI_CATEGORIES))
    return cells.with_poi(counts)


def make_city(name, cells, seed=0, rows=3, cols=3, tasks=("t0", "t1")):
    bbox = cells.bbox
    regions = tile_regions(bbox, rows, cols)
    rng = Rng(seed, ("tiny-targets", name))
    records = []
    for task in tasks:
        values = rng.np.normal(size=len(regions))
        records += [{"region_id": r.id, "task_id": task, "value": float(v)} for r, v in zip(regions, values)]
    return City(name=name, cells=cells, regions=regions, targets=pd.DataFrame(records))


@pytest.fixture
def city_factory():
    return make_city


@pytest.fixture
def tiny_city(tiny_cells):
    return make_city("tiny", tiny_cells)


@pytest.fixture
def tiny_run_config():
    """RunConfig small enough for a full pipeline pass in seconds"""
    return RunConfig(d=16, heads=2, enc_layers=1, dec_layers=1, k=2, l=3, pretrain_epochs=1, pretrain_batch=32,
                     lr_pre=1e-3, T=10, d_dn=16, diff_epochs=3, diff_batch=32, K=3, sr=2, finetune_epochs=2,
                     seed=0)


@pytest.fixture
def tiny_city_spec():
    """Synthetic city spec with a handful of regions"""
    return SyntheticCitySpec(
        name="mini", bbox=[0.0, 0.0, 1500.0, 1500.0], edge_m=150.0, num_classes=3, smoothing=1,
        profile_seed=7, poi_scale=4.0, region_rows=3, region_cols=3,
        tasks=[TaskSpec(name="lin", kind="linear", intercept=1.0, coefs=[1.0, 2.0, 3.0], sigma=0.1),
               TaskSpec(name="exp", kind="loglinear", intercept=0.0, coefs=[0.5, -0.5, 0.2], sigma=0.05)])

