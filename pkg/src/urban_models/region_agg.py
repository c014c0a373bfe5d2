# This file is part of the UrbanVerse tool

# src/urban_models/region_agg.py
import logging
from dataclasses import dataclass

import numpy as np

from common.errors import DataError
from data_processing.grid import region_cell_overlap

logger = logging.getLogger(__name__)


@dataclass
class RegionEmbedding:
    region_id: int
    h: np.ndarray


def aggregate(weights, embeddings):
    """h = sum over overlapping cells of omega * x_cell (no renormalisation of omega)"""
    if len(weights) == 0:
        raise DataError(f"region {weights.region_id} does not overlap any cell of the grid")
    X = np.stack([embeddings[c] for c in weights.cell_ids])
    h = np.asarray(weights.weights, dtype=float) @ X
    if not np.all(np.isfinite(h)):
        raise DataError(f"region {weights.region_id}: non-finite embedding")
    return RegionEmbedding(region_id=weights.region_id, h=h)


def aggregate_all(regions, cells, embeddings):
    """Overlap weights and region embeddings for every region, in region order"""
    out = []
    for region in regions:
        out.append(aggregate(region_cell_overlap(region, cells), embeddings))
    logger.info(f"Aggregated {len(out)} region embeddings of dimension {embeddings.dim}")
    return out
