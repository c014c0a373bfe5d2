# This file is part of the UrbanVerse tool

# src/data_processing/city_io.py
"""
Readers and writers for the on-disk city format and the pipeline artifacts.

A city directory holds either
    cells.csv  (cell_id,cx,cy,poi_0..poi_14) + edges.csv (cell_a,cell_b) [+ grid.json]
or raw points
    pois.csv   (x,y,category or lon,lat,category) + bbox.json [+ poi_categories.yaml]
plus regions.json and an optional targets.csv (region_id,task_id,value).
"""
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import yaml

from common.errors import DataError, MissingArtifactError
from data_processing.grid import (
    DEFAULT_EDGE_M, NUM_POI_CATEGORIES, POI_CATEGORIES, CellSet, Region, assign_pois, build_hex_grid,
    project_equirectangular,
)

logger = logging.getLogger(__name__)

POI_COLUMNS = [f"poi_{i}" for i in range(NUM_POI_CATEGORIES)]
CELL_COLUMNS = ["cell_id", "cx", "cy"] + POI_COLUMNS
EDGE_COLUMNS = ["cell_a", "cell_b"]
TARGET_COLUMNS = ["region_id", "task_id", "value"]


@dataclass
class City:
    name: str
    cells: CellSet
    regions: list
    targets: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=TARGET_COLUMNS))

    @property
    def region_ids(self):
        return [r.id for r in self.regions]

    def task_ids(self):
        return sorted(self.targets["task_id"].astype(str).unique().tolist())

    def target_matrix(self, task_ids=None):
        """(n_regions, U) raw targets in region order, NaN where missing"""
        task_ids = self.task_ids() if task_ids is None else [str(t) for t in task_ids]
        if self.targets.empty:
            return np.full((len(self.regions), len(task_ids)), np.nan)
        table = self.targets.assign(task_id=self.targets["task_id"].astype(str))
        wide = table.pivot_table(index="region_id", columns="task_id", values="value", aggfunc="first")
        wide = wide.reindex(index=self.region_ids, columns=task_ids)
        return wide.to_numpy(dtype=np.float64)

    def __str__(self):
        return (f"City {self.name}: {len(self.cells)} cells, {len(self.regions)} regions, "
                f"{len(self.targets)} targets over tasks {self.task_ids()}")


# CSV helpers

def _read_csv(path, columns, producer=None):
    if not os.path.exists(path):
        if producer:
            raise MissingArtifactError(path, producer)
        raise DataError("file not found", path=path)
    try:
        df = pd.read_csv(path, skipinitialspace=True, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=columns)
    except pd.errors.ParserError as e:
        raise DataError(f"malformed CSV ({e})", path=path) from None
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise DataError(f"missing columns {missing}, expected header {','.join(columns)}", path=path, line=1)
    return df


def _numeric(df, column, path, integer=False, nonnegative=False):
    values = pd.to_numeric(df[column], errors="coerce")
    bad = values.isna()
    if integer:
        bad |= values.notna() & (values != values.round())
    if nonnegative:
        bad |= values < 0
    if bad.any():
        row = int(np.argmax(bad.to_numpy()))
        raise DataError(f"invalid value {df[column].iloc[row]!r} in column {column}", path=path, line=row + 2)
    return values.astype(np.int64) if integer else values.astype(np.float64)


# Cells, regions, targets

def read_cells(city_dir):
    cells_path = os.path.join(city_dir, "cells.csv")
    edges_path = os.path.join(city_dir, "edges.csv")
    cells_df = _read_csv(cells_path, CELL_COLUMNS)
    edges_df = _read_csv(edges_path, EDGE_COLUMNS)
    ids = _numeric(cells_df, "cell_id", cells_path, integer=True)
    if ids.tolist() != list(range(len(ids))):
        raise DataError("cell ids must be 0..n-1 in file order", path=cells_path)
    centers = np.column_stack([_numeric(cells_df, "cx", cells_path), _numeric(cells_df, "cy", cells_path)])
    poi = np.column_stack([_numeric(cells_df, c, cells_path, integer=True, nonnegative=True) for c in POI_COLUMNS]) \
        if len(cells_df) else np.zeros((0, NUM_POI_CATEGORIES), dtype=np.int64)
    a = _numeric(edges_df, "cell_a", edges_path, integer=True)
    b = _numeric(edges_df, "cell_b", edges_path, integer=True)
    for row, (i, j) in enumerate(zip(a, b)):
        if not (0 <= i < len(ids) and 0 <= j < len(ids)):
            raise DataError(f"edge ({i}, {j}) references an unknown cell", path=edges_path, line=row + 2)
    edge_m = DEFAULT_EDGE_M
    grid_path = os.path.join(city_dir, "grid.json")
    if os.path.exists(grid_path):
        with open(grid_path) as f:
            edge_m = float(json.load(f).get("edge_m", DEFAULT_EDGE_M))
    return CellSet.from_table(ids, centers, poi, zip(a.tolist(), b.tolist()), edge_m=edge_m)


def write_cells(cells, city_dir):
    os.makedirs(city_dir, exist_ok=True)
    centers = cells.centers()
    table = pd.DataFrame(cells.poi_matrix(), columns=POI_COLUMNS)
    table.insert(0, "cy", centers[:, 1])
    table.insert(0, "cx", centers[:, 0])
    table.insert(0, "cell_id", np.arange(len(cells)))
    table.to_csv(os.path.join(city_dir, "cells.csv"), index=False, float_format="%.17g")
    pd.DataFrame(cells.edges(), columns=EDGE_COLUMNS).to_csv(os.path.join(city_dir, "edges.csv"), index=False)
    with open(os.path.join(city_dir, "grid.json"), "w") as f:
        json.dump({"edge_m": cells.edge_m, "bbox": cells.bbox, "dropped_pois": cells.dropped_pois}, f, indent=2)


def read_regions(path):
    if not os.path.exists(path):
        raise DataError("file not found", path=path)
    try:
        with open(path) as f:
            records = json.load(f)
    except ValueError as e:
        raise DataError(f"invalid JSON ({e})", path=path) from None
    if not isinstance(records, list):
        raise DataError("expected an array of {region_id, polygon} objects", path=path)
    regions, seen = [], set()
    for i, record in enumerate(records):
        try:
            region = Region.from_coords(record["region_id"], record["polygon"])
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"region entry {i} is malformed ({e})", path=path) from None
        except DataError as e:
            raise DataError(f"region entry {i}: {e}", path=path) from None
        if region.id in seen:
            raise DataError(f"duplicate region id {region.id}", path=path)
        seen.add(region.id)
        regions.append(region)
    return regions


def write_regions(regions, path):
    with open(path, "w") as f:
        json.dump([{"region_id": r.id, "polygon": r.to_coords()} for r in regions], f)


def read_targets(path, region_ids=None):
    if not os.path.exists(path):
        return pd.DataFrame(columns=TARGET_COLUMNS)
    df = _read_csv(path, TARGET_COLUMNS)
    if df.empty:
        return pd.DataFrame(columns=TARGET_COLUMNS)
    out = pd.DataFrame({"region_id": _numeric(df, "region_id", path, integer=True),
                        "task_id": df["task_id"].astype(str).str.strip(),
                        "value": _numeric(df, "value", path)})
    if region_ids is not None:
        unknown = ~out["region_id"].isin(region_ids)
        if unknown.any():
            row = int(np.argmax(unknown.to_numpy()))
            raise DataError(f"unknown region id {out['region_id'].iloc[row]}", path=path, line=row + 2)
    duplicated = out.duplicated(["region_id", "task_id"])
    if duplicated.any():
        row = int(np.argmax(duplicated.to_numpy()))
        raise DataError("duplicate (region_id, task_id) pair", path=path, line=row + 2)
    return out


def write_targets(targets, path):
    targets[TARGET_COLUMNS].to_csv(path, index=False, float_format="%.17g")


# Raw POI ingest

def load_category_mapping(city_dir):
    """label -> class index; poi_categories.yaml maps labels to class names or indices"""
    mapping = {name: i for i, name in enumerate(POI_CATEGORIES)}
    mapping.update({str(i): i for i in range(NUM_POI_CATEGORIES)})
    path = os.path.join(city_dir, "poi_categories.yaml")
    if os.path.exists(path):
        with open(path) as f:
            user = yaml.safe_load(f) or {}
        for label, target in user.items():
            index = POI_CATEGORIES.index(target) if target in POI_CATEGORIES else target
            if not isinstance(index, int) or not 0 <= index < NUM_POI_CATEGORIES:
                raise DataError(f"label {label!r} maps to {target!r}, which is not one of the 15 categories",
                                path=path)
            mapping[str(label)] = index
    return mapping


def read_raw_pois(city_dir, edge_m=DEFAULT_EDGE_M):
    pois_path = os.path.join(city_dir, "pois.csv")
    bbox_path = os.path.join(city_dir, "bbox.json")
    df = _read_csv(pois_path, ["category"])
    if not os.path.exists(bbox_path):
        raise DataError("file not found", path=bbox_path)
    with open(bbox_path) as f:
        bbox_spec = json.load(f)
    if "bbox" not in bbox_spec or len(bbox_spec["bbox"]) != 4:
        raise DataError("expected {\"bbox\": [x_min, y_min, x_max, y_max]}", path=bbox_path)
    mapping = load_category_mapping(city_dir)
    labels = df["category"].astype(str).str.strip()
    unknown = ~labels.isin(list(mapping))
    if unknown.any():
        row = int(np.argmax(unknown.to_numpy()))
        raise DataError(f"unmapped POI category {labels.iloc[row]!r}", path=pois_path, line=row + 2)
    categories = labels.map(mapping).to_numpy(dtype=float)

    if {"lon", "lat"} <= set(df.columns):
        lon = _numeric(df, "lon", pois_path).to_numpy()
        lat = _numeric(df, "lat", pois_path).to_numpy()
        b = bbox_spec["bbox"]  # lon_min, lat_min, lon_max, lat_max
        lon0, lat0 = 0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3])
        x, y, _ = project_equirectangular(lon, lat, lon0, lat0)
        corners_x, corners_y, _ = project_equirectangular([b[0], b[2]], [b[1], b[3]], lon0, lat0)
        bbox = (corners_x[0], corners_y[0], corners_x[1], corners_y[1])
    elif {"x", "y"} <= set(df.columns):
        x = _numeric(df, "x", pois_path).to_numpy()
        y = _numeric(df, "y", pois_path).to_numpy()
        bbox = tuple(bbox_spec["bbox"])
    else:
        raise DataError("expected x,y or lon,lat coordinate columns", path=pois_path, line=1)
    cells = build_hex_grid(bbox, edge_m=float(bbox_spec.get("edge_m", edge_m)))
    return assign_pois(cells, np.column_stack([x, y, categories]))


def load_city(city_dir, name=None, edge_m=DEFAULT_EDGE_M):
    """Validated city from a directory (gridded cells or raw POIs)"""
    name = name or os.path.basename(os.path.normpath(city_dir))
    if not os.path.isdir(city_dir):
        raise DataError("city directory not found", path=city_dir)
    if os.path.exists(os.path.join(city_dir, "cells.csv")):
        cells = read_cells(city_dir)
    elif os.path.exists(os.path.join(city_dir, "pois.csv")):
        cells = read_raw_pois(city_dir, edge_m=edge_m)
    else:
        raise DataError("neither cells.csv nor pois.csv found", path=city_dir)
    regions = read_regions(os.path.join(city_dir, "regions.json"))
    targets = read_targets(os.path.join(city_dir, "targets.csv"), region_ids=[r.id for r in regions])
    city = City(name=name, cells=cells, regions=regions, targets=targets)
    logger.info(f"Loaded {city}")
    return city


def save_city(city, city_dir):
    os.makedirs(city_dir, exist_ok=True)
    write_cells(city.cells, city_dir)
    write_regions(city.regions, os.path.join(city_dir, "regions.json"))
    write_targets(city.targets, os.path.join(city_dir, "targets.csv"))
    logger.info(f"Saved {city} to {city_dir}")


# Pipeline artifacts

def write_embeddings(path, ids, matrix, id_column="region_id", prefix="h"):
    matrix = np.asarray(matrix, dtype=np.float64)
    table = pd.DataFrame(matrix, columns=[f"{prefix}_{i}" for i in range(matrix.shape[1])])
    table.insert(0, id_column, list(ids))
    table.to_csv(path, index=False, float_format="%.17g")


def read_embeddings(path, id_column="region_id", producer="aggregate"):
    """(ids, matrix); the dimension is inferred from the header"""
    if not os.path.exists(path):
        raise MissingArtifactError(path, producer)
    df = pd.read_csv(path, float_precision="round_trip")
    if id_column not in df.columns or df.shape[1] < 2:
        raise DataError(f"expected header {id_column},h_0..h_(d-1)", path=path, line=1)
    values = df.drop(columns=[id_column])
    bad = values.isna().any(axis=1) | ~np.isfinite(values.to_numpy(dtype=np.float64, na_value=np.nan)).all(axis=1)
    if bad.any():
        raise DataError("non-finite embedding value", path=path, line=int(np.argmax(bad.to_numpy())) + 2)
    return df[id_column].tolist(), values.to_numpy(dtype=np.float64)


def write_predictions(path, predictions):
    pd.DataFrame([p.to_row() for p in predictions]).to_csv(path, index=False, float_format="%.17g")


def read_predictions(path):
    if not os.path.exists(path):
        raise MissingArtifactError(path, "predict")
    df = pd.read_csv(path, dtype={"task_id": str, "region_id": str}, float_precision="round_trip")
    sample_columns = [c for c in df.columns if c.startswith("sample_")]
    return df, sample_columns


def write_priors(path, priors):
    pd.DataFrame([p.to_row() for p in priors],
                 columns=["region_id", "task_id", "prior", "neighbors", "weights"]).to_csv(path, index=False)


def write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, default=_json_default)


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialise {type(value)}")
