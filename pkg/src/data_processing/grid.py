# This file is part of the UrbanVerse tool

# src/data_processing/grid.py
"""
Hexagonal cells, regions and the overlap geometry between them.

All coordinates are planar metres. Hexagons are pointy-top and laid out
in odd-row offset coordinates (odd rows shifted right by half a cell
width); cell ids are assigned row-major over (row, col).
"""
import dataclasses
import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import shapely
from scipy.spatial import cKDTree
from shapely.geometry import Polygon, box
from shapely.geometry.polygon import orient
from shapely.ops import unary_union
from shapely.strtree import STRtree
from shapely.validation import explain_validity

from common.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

NUM_POI_CATEGORIES = 15
POI_CATEGORIES = [
    "education", "commercial_industrial", "accommodation", "culture_recreation",
    "healthcare", "entertainment", "worship", "food_drink", "parking",
    "transportation", "residential", "camping_outdoor", "sports", "financial", "other",
]
DEFAULT_EDGE_M = 150.0
EARTH_RADIUS_M = 6371008.8
SQRT3 = math.sqrt(3.0)
_HEX_ANGLES = np.deg2rad([30.0, 90.0, 150.0, 210.0, 270.0, 330.0])
_EVEN_ROW_NEIGHBORS = [(1, 0), (-1, 0), (-1, -1), (0, -1), (-1, 1), (0, 1)]
_ODD_ROW_NEIGHBORS = [(1, 0), (-1, 0), (0, -1), (1, -1), (0, 1), (1, 1)]


def project_equirectangular(lon, lat, lon0=None, lat0=None):
    """Project lon/lat degrees to planar metres about (lon0, lat0), the centroid by default"""
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    lon0 = float(np.mean(lon)) if lon0 is None else lon0
    lat0 = float(np.mean(lat)) if lat0 is None else lat0
    x = EARTH_RADIUS_M * np.deg2rad(lon - lon0) * math.cos(math.radians(lat0))
    y = EARTH_RADIUS_M * np.deg2rad(lat - lat0)
    return x, y, (lon0, lat0)


# Hexagon lattice

def hex_polygon(center, edge_m):
    """Six counter-clockwise vertices of a pointy-top hexagon"""
    cx, cy = center
    return np.column_stack([cx + edge_m * np.cos(_HEX_ANGLES), cy + edge_m * np.sin(_HEX_ANGLES)])


def hex_shape(center, edge_m):
    return Polygon(hex_polygon(center, edge_m))


def hex_area(edge_m):
    return 1.5 * SQRT3 * edge_m * edge_m


def hex_center(col, row, origin, edge_m):
    width = SQRT3 * edge_m
    return (origin[0] + (col + 0.5 * (row & 1)) * width, origin[1] + row * 1.5 * edge_m)


def lattice_neighbors(col, row):
    offsets = _ODD_ROW_NEIGHBORS if row & 1 else _EVEN_ROW_NEIGHBORS
    return [(col + dc, row + dr) for dc, dr in offsets]


@dataclass
class Cell:
    id: int
    center: tuple
    polygon: np.ndarray
    poi: np.ndarray = field(default_factory=lambda: np.zeros(NUM_POI_CATEGORIES, dtype=np.int64))
    neighbors: list = field(default_factory=list)
    col: int = None
    row: int = None

    @property
    def shape(self):
        return Polygon(self.polygon)


class CellSet:
    """
    Class to store the cells of one study area (hexagons, POI counts, adjacency)
    """

    def __init__(self, edge_m=DEFAULT_EDGE_M, bbox=None, origin=None):
        self.edge_m = float(edge_m)
        self.bbox = bbox
        self.origin = origin
        self.cells = []  # index == cell id
        self.dropped_pois = 0
        self._by_offset = {}
        self._tree = None
        self._shapes = None
        self._index = None

    def add_cell(self, center, col=None, row=None, poi=None):
        """Add a cell; ids are handed out in insertion order"""
        cell = Cell(id=len(self.cells), center=(float(center[0]), float(center[1])),
                    polygon=hex_polygon(center, self.edge_m), col=col, row=row)
        if poi is not None:
            cell.poi = np.asarray(poi, dtype=np.int64).copy()
        self.cells.append(cell)
        if col is not None:
            self._by_offset[(col, row)] = cell.id
        self._tree = self._shapes = self._index = None
        return cell

    def add_edge(self, a, b):
        if a == b:
            return
        if b not in self.cells[a].neighbors:
            self.cells[a].neighbors.append(b)
        if a not in self.cells[b].neighbors:
            self.cells[b].neighbors.append(a)

    def get_cell(self, cell_id):
        if not 0 <= cell_id < len(self.cells):
            raise DataError(f"unknown cell id {cell_id}")
        return self.cells[cell_id]

    def lookup(self, col, row):
        return self._by_offset.get((col, row))

    def centers(self):
        return np.array([c.center for c in self.cells], dtype=float).reshape(-1, 2)

    def poi_matrix(self):
        return np.array([c.poi for c in self.cells], dtype=np.int64).reshape(-1, NUM_POI_CATEGORIES)

    def edges(self):
        return sorted({(min(c.id, n), max(c.id, n)) for c in self.cells for n in c.neighbors})

    def cell_area(self):
        return hex_area(self.edge_m)

    def nearest(self, points, k=3):
        if self._tree is None:
            self._tree = cKDTree(self.centers())
        k = min(k, len(self.cells))
        dist, idx = self._tree.query(np.asarray(points, dtype=float).reshape(-1, 2), k=k)
        return np.asarray(idx).reshape(len(points), k)

    def shapes(self):
        """Cell hexagons as shapely polygons, index == cell id"""
        if self._shapes is None:
            self._shapes = [cell.shape for cell in self.cells]
        return self._shapes

    def candidates(self, geometry):
        """Sorted ids of the cells whose bounding boxes meet geometry"""
        if self._index is None:
            self._index = STRtree(self.shapes())
        return sorted(int(i) for i in self._index.query(geometry))

    def with_poi(self, poi_matrix):
        """Copy of this set with replaced POI counts; geometry caches are shared"""
        clone = copy.copy(self)
        clone.cells = [dataclasses.replace(cell, poi=np.asarray(row, dtype=np.int64).copy(),
                                           neighbors=list(cell.neighbors))
                       for cell, row in zip(self.cells, np.asarray(poi_matrix))]
        clone._by_offset = dict(self._by_offset)
        return clone

    @classmethod
    def from_table(cls, cell_ids, centers, poi, edges, edge_m=DEFAULT_EDGE_M):
        """Rebuild a cell set from cells.csv / edges.csv columns"""
        cell_ids = [int(i) for i in cell_ids]
        if cell_ids != list(range(len(cell_ids))):
            raise DataError("cell ids must be 0..n-1 in file order")
        cells = cls(edge_m=edge_m)
        for center, counts in zip(np.asarray(centers, dtype=float), np.asarray(poi)):
            cells.add_cell(center, poi=counts)
        for a, b in edges:
            if not (0 <= a < len(cells) and 0 <= b < len(cells)):
                raise DataError(f"edge ({a}, {b}) references an unknown cell")
            cells.add_edge(int(a), int(b))
        centers = cells.centers()
        if len(centers):
            cells.bbox = (float(centers[:, 0].min()), float(centers[:, 1].min()),
                          float(centers[:, 0].max()), float(centers[:, 1].max()))
        return cells

    def __len__(self):
        return len(self.cells)

    def __iter__(self):
        return iter(self.cells)

    def __str__(self):
        return f"CellSet with {len(self.cells)} cells of edge {self.edge_m:g} m and {len(self.edges())} adjacencies"


def build_hex_grid(bbox, edge_m=DEFAULT_EDGE_M):
    """Pointy-top hexagons covering the rectangle bbox = (xmin, ymin, xmax, ymax)"""
    xmin, ymin, xmax, ymax = [float(v) for v in bbox]
    if edge_m <= 0:
        raise ConfigError(f"edge length must be positive, got {edge_m}")
    if not (xmax > xmin and ymax > ymin):
        raise ConfigError(f"degenerate bounding box {bbox}")

    width = SQRT3 * edge_m
    origin = (0.5 * (xmin + xmax), 0.5 * (ymin + ymax))
    cells = CellSet(edge_m=edge_m, bbox=(xmin, ymin, xmax, ymax), origin=origin)

    # Smaller than one hexagon: a single centred cell
    if xmax - xmin <= width and ymax - ymin <= 2.0 * edge_m:
        cells.add_cell(origin, col=0, row=0)
        logger.info(f"Bounding box smaller than one hexagon, built a single cell")
        return cells

    rect = box(xmin, ymin, xmax, ymax)
    min_area = 1e-9 * hex_area(edge_m)
    row_lo = math.floor((ymin - origin[1] - edge_m) / (1.5 * edge_m))
    row_hi = math.ceil((ymax - origin[1] + edge_m) / (1.5 * edge_m))
    col_lo = math.floor((xmin - origin[0] - width) / width) - 1
    col_hi = math.ceil((xmax - origin[0] + width) / width) + 1

    for row in range(row_lo, row_hi + 1):
        for col in range(col_lo, col_hi + 1):
            cx, cy = hex_center(col, row, origin, edge_m)
            if cx + width / 2 <= xmin or cx - width / 2 >= xmax or cy + edge_m <= ymin or cy - edge_m >= ymax:
                continue
            # keep only hexagons that really overlap the rectangle
            if hex_shape((cx, cy), edge_m).intersection(rect).area <= min_area:
                continue
            cells.add_cell((cx, cy), col=col, row=row)

    for cell in cells:
        for col, row in lattice_neighbors(cell.col, cell.row):
            other = cells.lookup(col, row)
            if other is not None:
                cells.add_edge(cell.id, other)
    for cell in cells:
        cell.neighbors.sort()

    logger.info(f"Built hexagonal grid: {cells}")
    return cells


def assign_pois(cells, pois):
    """
    Count POIs per cell and category.

    pois: iterable of (x, y, category) or an array of shape (n, 3).
    A POI on a shared boundary goes to the lowest cell id; POIs outside
    every cell are tallied in the returned set's dropped_pois.
    """
    pois = np.asarray(list(pois) if not isinstance(pois, np.ndarray) else pois, dtype=float).reshape(-1, 3)
    counts = np.zeros((len(cells), NUM_POI_CATEGORIES), dtype=np.int64)
    dropped = 0
    if len(pois):
        categories = pois[:, 2]
        bad = (categories != np.round(categories)) | (categories < 0) | (categories >= NUM_POI_CATEGORIES)
        if bad.any():
            first = int(np.argmax(bad))
            raise DataError(f"POI {first} has category {categories[first]:g}, expected an integer in 0..14")
        candidates = cells.nearest(pois[:, :2], k=3)
        tol = 1e-9 * cells.edge_m
        points = shapely.points(pois[:, :2])
        shapes = cells.shapes()
        owner = np.full(len(pois), -1, dtype=np.int64)
        for slot in range(candidates.shape[1]):
            cand = candidates[:, slot]
            for cell_id in np.unique(cand):
                sel = np.where(cand == cell_id)[0]
                # distance 0 inside, tol absorbs rounding on shared edges
                hit = sel[shapely.distance(shapes[cell_id], points[sel]) <= tol]
                better = (owner[hit] < 0) | (owner[hit] > cell_id)
                owner[hit[better]] = cell_id
        placed = owner >= 0
        np.add.at(counts, (owner[placed], categories[placed].astype(np.int64)), 1)
        dropped = int((~placed).sum())
    result = cells.with_poi(counts)
    result.dropped_pois = dropped
    if dropped:
        logger.warning(f"{dropped} of {len(pois)} POIs fall outside the grid and were dropped")
    return result


# Regions

@dataclass
class Region:
    """
    Class to store one region: its polygon parts as counter-clockwise vertex
    arrays (no closing vertex) and their union as a shapely geometry
    """
    id: int
    parts: list
    shape: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        parts, polygons = [], []
        for part in self.parts:
            pts = np.asarray(part, dtype=float).reshape(-1, 2)
            if len(pts) > 1 and np.allclose(pts[0], pts[-1]):
                pts = pts[:-1]
            if len(pts) < 3:
                raise DataError(f"region {self.id}: a polygon part needs at least 3 vertices")
            polygon = Polygon(pts)
            if polygon.area == 0.0:
                raise DataError(f"region {self.id}: polygon has zero area")
            if not polygon.is_valid:
                raise DataError(f"region {self.id}: invalid polygon ({explain_validity(polygon)})")
            polygon = orient(polygon, sign=1.0)
            parts.append(np.asarray(polygon.exterior.coords, dtype=float)[:-1])
            polygons.append(polygon)
        if not parts:
            raise DataError(f"region {self.id}: no polygon given")
        self.parts = parts
        self.shape = polygons[0] if len(polygons) == 1 else unary_union(polygons)

    @property
    def area(self):
        return float(self.shape.area)

    @property
    def bbox(self):
        return tuple(float(v) for v in self.shape.bounds)

    @classmethod
    def from_coords(cls, region_id, coords):
        """Accept [[x, y], ...] for one ring or [[[x, y], ...], ...] for a multi-part region"""
        arr = coords
        depth = 0
        while isinstance(arr, (list, tuple)) and arr:
            arr = arr[0]
            depth += 1
        parts = [coords] if depth == 2 else list(coords)
        return cls(id=int(region_id), parts=parts)

    def to_coords(self):
        if len(self.parts) == 1:
            return self.parts[0].tolist()
        return [p.tolist() for p in self.parts]


@dataclass
class OverlapWeights:
    region_id: int
    cell_ids: list
    weights: np.ndarray

    def items(self):
        return list(zip(self.cell_ids, self.weights.tolist()))

    def __len__(self):
        return len(self.cell_ids)


def region_cell_overlap(region, cells):
    """omega = Area(region ∩ cell) / Area(cell) for every cell the region touches"""
    cell_area = cells.cell_area()
    shapes = cells.shapes()
    cell_ids, weights = [], []
    for cell_id in cells.candidates(region.shape):
        area = region.shape.intersection(shapes[cell_id]).area
        if area < 1e-9 * cell_area:
            continue
        cell_ids.append(cell_id)
        weights.append(min(1.0, max(0.0, area / cell_area)))
    return OverlapWeights(region_id=region.id, cell_ids=cell_ids, weights=np.asarray(weights, dtype=float))
