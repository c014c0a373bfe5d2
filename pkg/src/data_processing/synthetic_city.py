# This file is part of the UrbanVerse tool

# src/data_processing/synthetic_city.py
"""
Seeded synthetic cities with known ground truth.

Each cell gets a latent land-use class from a smoothed random field; POI
counts are Poisson draws from per-class rate profiles shared by every city
with the same profile_seed. Regions are a rectangular tiling and each task
is a documented function of the regions' class fractions plus Gaussian
noise. The draws needed to recompute every target are written to
truth-manifest.json.
"""
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
import yaml

from common.errors import ConfigError, DataError
from data_processing.city_io import City, save_city, write_json
from data_processing.grid import NUM_POI_CATEGORIES, Region, build_hex_grid, region_cell_overlap
from urban_models.numerics import Rng

logger = logging.getLogger(__name__)

TASK_KINDS = ("linear", "loglinear", "interaction")


@dataclass
class TaskSpec:
    name: str
    kind: str = "linear"
    intercept: float = 0.0
    coefs: list = field(default_factory=list)  # one per latent class
    pair: list = field(default_factory=lambda: [0, 1])  # interaction classes
    gain: float = 0.0
    sigma: float = 0.0

    def validate(self, num_classes):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task {self.name}: kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if len(self.coefs) != num_classes:
            raise ConfigError(f"task {self.name}: needs {num_classes} coefficients, got {len(self.coefs)}")
        if self.sigma < 0:
            raise ConfigError(f"task {self.name}: sigma must be >= 0")
        if self.kind == "interaction" and not all(0 <= c < num_classes for c in self.pair):
            raise ConfigError(f"task {self.name}: interaction pair {self.pair} out of range")
        return self

    def formula(self):
        lin = f"{self.intercept} + coefs . fractions"
        if self.kind == "loglinear":
            return f"exp({lin})"
        if self.kind == "interaction":
            return f"{lin} + {self.gain} * fractions[{self.pair[0]}] * fractions[{self.pair[1]}]"
        return lin


@dataclass
class SyntheticCitySpec:
    name: str = "synthetic"
    bbox: list = field(default_factory=lambda: [0.0, 0.0, 12000.0, 12000.0])
    edge_m: float = 150.0
    num_classes: int = 4
    smoothing: int = 3
    profile_seed: int = 7
    poi_scale: float = 4.0
    region_rows: int = 20
    region_cols: int = 20
    tasks: list = field(default_factory=list)

    def __post_init__(self):
        self.tasks = [t if isinstance(t, TaskSpec) else TaskSpec(**t) for t in self.tasks]

    def validate(self):
        if self.num_classes < 1 or self.smoothing < 0 or self.poi_scale <= 0:
            raise ConfigError("synthetic city needs num_classes >= 1, smoothing >= 0 and poi_scale > 0")
        if self.region_rows < 1 or self.region_cols < 1:
            raise ConfigError("region tiling needs at least one row and one column")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigError(f"task names must be unique, got {names}")
        for task in self.tasks:
            task.validate(self.num_classes)
        return self

    @classmethod
    def from_yaml(cls, path):
        if not os.path.exists(path):
            raise ConfigError(f"synthetic city spec {path} not found")
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        try:
            return cls(**data).validate()
        except TypeError as e:
            raise ConfigError(f"{path}: {e}") from None

    def to_dict(self):
        return asdict(self)


def latent_field(cells, num_classes, smoothing, rng):
    """Per-cell class = argmax of neighbourhood-smoothed Gaussian noise"""
    noise = rng.np.standard_normal((len(cells), num_classes))
    for _ in range(smoothing):
        smoothed = noise.copy()
        for cell in cells:
            if cell.neighbors:
                smoothed[cell.id] = (noise[cell.id] + noise[cell.neighbors].sum(axis=0)) / (1 + len(cell.neighbors))
        noise = smoothed
    return noise.argmax(axis=1)


def poi_profiles(num_classes, poi_scale, profile_seed):
    """(num_classes, 15) Poisson rates; each class has three dominant categories"""
    rng = Rng(profile_seed, ("poi-profiles", num_classes))
    rates = rng.np.gamma(1.0, 0.15 * poi_scale, size=(num_classes, NUM_POI_CATEGORIES))
    for c in range(num_classes):
        dominant = rng.choice(NUM_POI_CATEGORIES, size=3, replace=False)
        rates[c, dominant] += poi_scale
    return rates


def tile_regions(bbox, rows, cols):
    xmin, ymin, xmax, ymax = bbox
    xs = np.linspace(xmin, xmax, cols + 1)
    ys = np.linspace(ymin, ymax, rows + 1)
    regions = []
    for j in range(rows):
        for i in range(cols):
            ring = [[xs[i], ys[j]], [xs[i + 1], ys[j]], [xs[i + 1], ys[j + 1]], [xs[i], ys[j + 1]]]
            regions.append(Region(id=j * cols + i, parts=[ring]))
    return regions


def class_fractions(regions, cells, classes, num_classes):
    """Overlap-weighted share of each latent class in every region"""
    F = np.zeros((len(regions), num_classes))
    for r, region in enumerate(regions):
        weights = region_cell_overlap(region, cells)
        for cell_id, w in weights.items():
            F[r, classes[cell_id]] += w
        total = F[r].sum()
        if total > 0:
            F[r] /= total
    return F


def evaluate_task(task, fractions):
    """Noiseless target values of one task"""
    fractions = np.asarray(fractions, dtype=np.float64)
    lin = task.intercept + fractions @ np.asarray(task.coefs, dtype=np.float64)
    if task.kind == "loglinear":
        return np.exp(lin)
    if task.kind == "interaction":
        return lin + task.gain * fractions[:, task.pair[0]] * fractions[:, task.pair[1]]
    return lin


def recompute_targets(manifest):
    """targets.csv rows rebuilt from a truth manifest"""
    spec = SyntheticCitySpec(**manifest["spec"])
    fractions = np.asarray(manifest["region_fractions"])
    rows = []
    for task in spec.tasks:
        values = evaluate_task(task, fractions) + np.asarray(manifest["noise"][task.name])
        rows += [{"region_id": rid, "task_id": task.name, "value": v}
                 for rid, v in zip(manifest["region_ids"], values)]
    return pd.DataFrame(rows, columns=["region_id", "task_id", "value"])


def generate_synthetic(spec, seed, out_dir=None):
    """Build a synthetic City (and write it plus truth-manifest.json when out_dir is given)"""
    spec.validate()
    rng = Rng(seed, ("synthetic", spec.name))
    cells = build_hex_grid(spec.bbox, spec.edge_m)
    classes = latent_field(cells, spec.num_classes, spec.smoothing, rng.substream("field"))
    rates = poi_profiles(spec.num_classes, spec.poi_scale, spec.profile_seed)
    counts = rng.substream("poi").np.poisson(rates[classes])
    cells = cells.with_poi(counts)

    regions = tile_regions(spec.bbox, spec.region_rows, spec.region_cols)
    fractions = class_fractions(regions, cells, classes, spec.num_classes)
    noise, rows = {}, []
    for task in spec.tasks:
        eps = task.sigma * rng.substream("noise", task.name).np.standard_normal(len(regions))
        values = evaluate_task(task, fractions) + eps
        if not np.all(np.isfinite(values)):
            raise DataError(f"task {task.name} produced non-finite targets")
        noise[task.name] = eps
        rows += [{"region_id": r.id, "task_id": task.name, "value": v} for r, v in zip(regions, values)]
    targets = pd.DataFrame(rows, columns=["region_id", "task_id", "value"])
    city = City(name=spec.name, cells=cells, regions=regions, targets=targets)

    if out_dir is not None:
        save_city(city, out_dir)
        manifest = {
            "seed": seed, "spec": spec.to_dict(), "latent_classes": classes, "poi_rates": rates,
            "region_ids": [r.id for r in regions], "region_fractions": fractions, "noise": noise,
            "task_formulas": {t.name: t.formula() for t in spec.tasks},
        }
        write_json(os.path.join(out_dir, "truth-manifest.json"), manifest)
    logger.info(f"Generated synthetic {city} with seed {seed}")
    return city
