"""Coordinate projection, bounding boxes, and the regular tile grid.

Every scoring and evaluation surface in the pipeline is expressed on a
TileGrid: a row-major partition of a WGS84 bounding box into equal
lat/lon rectangles sized from a target tile edge length in meters.

A local equirectangular projection centered on the grid origin converts
coordinates to meters so that kernel lengthscales are isotropic in
physical distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_M = 6371008.8

# meters per degree of latitude (and of longitude at the equator)
_M_PER_DEG = EARTH_RADIUS_M * math.pi / 180.0


@dataclass(frozen=True)
class GeoPoint:
    """A WGS84 coordinate in degrees."""

    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned lat/lon extent, strictly non-degenerate."""

    min_lat: float
    max_lat: float
    min_lon: float
    max_lon: float

    def __post_init__(self):
        GeoPoint(self.min_lat, self.min_lon)
        GeoPoint(self.max_lat, self.max_lon)
        if not self.min_lat < self.max_lat:
            raise ValueError("degenerate bounding box: min_lat >= max_lat")
        if not self.min_lon < self.max_lon:
            raise ValueError("degenerate bounding box: min_lon >= max_lon")

    def contains(self, lat: float, lon: float) -> bool:
        return (self.min_lat <= lat <= self.max_lat
                and self.min_lon <= lon <= self.max_lon)

    @property
    def origin(self) -> GeoPoint:
        """South-west corner; grids and projections are anchored here."""
        return GeoPoint(self.min_lat, self.min_lon)


@dataclass(frozen=True)
class LocalXY:
    """Meters east (x) and north (y) of a projection origin."""

    x: float
    y: float


def project(p: GeoPoint, origin: GeoPoint) -> LocalXY:
    """Project ``p`` to local meters via an equirectangular map at ``origin``.

    x = (lon - lon0) * cos(lat0) * R * pi/180, y = (lat - lat0) * R * pi/180.
    Valid within +/-85 degrees latitude; raises ValueError outside.
    """
    for q in (p, origin):
        if abs(q.lat) > 85.0:
            raise ValueError(f"latitude {q.lat} outside +/-85 projection range")
    cos_lat0 = math.cos(math.radians(origin.lat))
    x = (p.lon - origin.lon) * cos_lat0 * _M_PER_DEG
    y = (p.lat - origin.lat) * _M_PER_DEG
    return LocalXY(x, y)


def unproject(xy: LocalXY, origin: GeoPoint) -> GeoPoint:
    """Inverse of :func:`project`; round-trips to within 1e-6 m."""
    if abs(origin.lat) > 85.0:
        raise ValueError(f"latitude {origin.lat} outside +/-85 projection range")
    cos_lat0 = math.cos(math.radians(origin.lat))
    lat = origin.lat + xy.y / _M_PER_DEG
    lon = origin.lon + xy.x / (cos_lat0 * _M_PER_DEG)
    return GeoPoint(lat, lon)


def project_arrays(lats: np.ndarray, lons: np.ndarray, origin: GeoPoint) -> np.ndarray:
    """Vectorized :func:`project`; returns an (n, 2) array of [x, y] meters."""
    cos_lat0 = math.cos(math.radians(origin.lat))
    x = (np.asarray(lons, dtype=float) - origin.lon) * cos_lat0 * _M_PER_DEG
    y = (np.asarray(lats, dtype=float) - origin.lat) * _M_PER_DEG
    return np.column_stack([x, y])


@dataclass(frozen=True)
class TileGrid:
    """Row-major tiling of a bounding box into n_rows x n_cols tiles.

    Tile j = row * n_cols + col, with row 0 at min_lat and col 0 at
    min_lon.  Tiles partition the bbox exactly; each tile's degree size
    is bbox extent / count, so the physical edge is <= the requested
    tile_size used to choose the counts.
    """

    bbox: BoundingBox
    tile_size: float
    n_rows: int
    n_cols: int

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("grid must have at least one tile")

    @property
    def origin(self) -> GeoPoint:
        return self.bbox.origin

    @property
    def n_tiles(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def dlat(self) -> float:
        return (self.bbox.max_lat - self.bbox.min_lat) / self.n_rows

    @property
    def dlon(self) -> float:
        return (self.bbox.max_lon - self.bbox.min_lon) / self.n_cols

    def row_col(self, j: int) -> tuple[int, int]:
        if not 0 <= j < self.n_tiles:
            raise ValueError(f"tile index {j} outside grid of {self.n_tiles} tiles")
        return divmod(j, self.n_cols)


def make_grid(bbox: BoundingBox, tile_size: float) -> TileGrid:
    """Build the tile grid covering ``bbox`` with tiles of ~``tile_size`` m.

    Counts are ceil(extent_m / tile_size) with extents measured by the
    local projection at the bbox corner origin.
    """
    if tile_size <= 0:
        raise ValueError("tile_size must be positive")
    origin = bbox.origin
    width_m = project(GeoPoint(bbox.min_lat, bbox.max_lon), origin).x
    height_m = project(GeoPoint(bbox.max_lat, bbox.min_lon), origin).y
    n_cols = max(1, math.ceil(width_m / tile_size - 1e-9))
    n_rows = max(1, math.ceil(height_m / tile_size - 1e-9))
    return TileGrid(bbox=bbox, tile_size=tile_size, n_rows=n_rows, n_cols=n_cols)


def _axis_index(value: float, lo: float, step: float, count: int) -> int:
    # Half-open toward the lower index: a shared edge belongs to the tile
    # below/left of it, so index = ceil(u) - 1 with u in [0, count].
    u = (value - lo) / step
    idx = math.ceil(u) - 1
    return min(max(idx, 0), count - 1)


def tile_of(grid: TileGrid, p: GeoPoint) -> int | None:
    """Index of the tile containing ``p``, or None outside the bbox.

    Boundary points belong to the tile with the lower index.
    """
    if not grid.bbox.contains(p.lat, p.lon):
        return None
    row = _axis_index(p.lat, grid.bbox.min_lat, grid.dlat, grid.n_rows)
    col = _axis_index(p.lon, grid.bbox.min_lon, grid.dlon, grid.n_cols)
    return row * grid.n_cols + col


def tile_indices(grid: TileGrid, lats: np.ndarray, lons: np.ndarray) -> np.ndarray:
    """Vectorized :func:`tile_of`; -1 marks points outside the bbox."""
    lats = np.asarray(lats, dtype=float)
    lons = np.asarray(lons, dtype=float)
    bbox = grid.bbox
    inside = ((lats >= bbox.min_lat) & (lats <= bbox.max_lat)
              & (lons >= bbox.min_lon) & (lons <= bbox.max_lon))
    rows = np.ceil((lats - bbox.min_lat) / grid.dlat) - 1
    cols = np.ceil((lons - bbox.min_lon) / grid.dlon) - 1
    rows = np.clip(rows, 0, grid.n_rows - 1).astype(np.int64)
    cols = np.clip(cols, 0, grid.n_cols - 1).astype(np.int64)
    out = rows * grid.n_cols + cols
    out[~inside] = -1
    return out


def centroid(grid: TileGrid, j: int) -> GeoPoint:
    """Geometric center of tile ``j``."""
    row, col = grid.row_col(j)
    lat = grid.bbox.min_lat + (row + 0.5) * grid.dlat
    lon = grid.bbox.min_lon + (col + 0.5) * grid.dlon
    return GeoPoint(lat, lon)


def centroids(grid: TileGrid) -> np.ndarray:
    """(n_tiles, 2) array of [lat, lon] centroids in tile-index order."""
    rows, cols = np.divmod(np.arange(grid.n_tiles), grid.n_cols)
    lat = grid.bbox.min_lat + (rows + 0.5) * grid.dlat
    lon = grid.bbox.min_lon + (cols + 0.5) * grid.dlon
    return np.column_stack([lat, lon])
