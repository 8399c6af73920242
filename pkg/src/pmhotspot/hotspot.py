"""Tile-wise hotspot scores from ensemble predictions.

The hotspot score of a tile is the posterior probability that the
noise-free normalized value at its centroid exceeds the city-wide
median of normalized readings:

    h = P[N(mean, variance) > median_y] = ndtr((mean - median_y) / sd)

Scores are posterior probabilities, not p-values: no hypothesis is
being tested.  Tiles never visited by a sensor still receive a score
(the surface extrapolates) but carry n_measurements = 0 so consumers
can filter them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import IO

import numpy as np
from scipy.special import ndtr

from pmhotspot.ensemble import predict_ensemble
from pmhotspot.errors import DataError
from pmhotspot.gp import GPModel
from pmhotspot.grid import BoundingBox, TileGrid, centroids, project_arrays


@dataclass(frozen=True)
class HotspotConfig:
    """City-wide median of normalized values and the classification cutoff."""

    median_y: float
    p_crit: float = 0.95

    def __post_init__(self):
        if not 0.0 < self.p_crit < 1.0:
            raise ValueError("p_crit must lie strictly inside (0, 1)")


def hotspot_score(mean, variance, median_y: float):
    """Probability that the latent value exceeds ``median_y``.

    Accepts scalars or arrays; variance must be strictly positive.
    """
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    if np.any(variance <= 0.0):
        raise ValueError("hotspot score requires strictly positive variance")
    h = ndtr((mean - median_y) / np.sqrt(variance))
    return float(h) if h.ndim == 0 else h


@dataclass
class HotspotGrid:
    """Per-tile posterior summary over a TileGrid.

    ``score`` is NaN for tiles without a prediction; such tiles are
    never silently treated as score 0.
    """

    grid: TileGrid
    mean: np.ndarray
    variance: np.ndarray
    score: np.ndarray
    n_measurements: np.ndarray

    def __post_init__(self):
        n = self.grid.n_tiles
        for name in ("mean", "variance", "score", "n_measurements"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} must have one entry per tile ({n})")

    def scored_mask(self) -> np.ndarray:
        return ~np.isnan(self.score)


def score_grid(
    grid: TileGrid,
    models: list[GPModel],
    cfg: HotspotConfig,
    n_measurements: np.ndarray,
    coord_mode: str = "local_xy",
) -> HotspotGrid:
    """Ensemble-predict at every tile centroid and convert to scores.

    ``coord_mode`` must match how the training coordinates were built:
    "local_xy" projects centroids to meters from the grid origin,
    "raw_degrees" feeds (lat, lon) directly.
    """
    cents = centroids(grid)
    if coord_mode == "local_xy":
        queries = project_arrays(cents[:, 0], cents[:, 1], grid.origin)
    elif coord_mode == "raw_degrees":
        queries = cents
    else:
        raise ValueError(f"unknown coord_mode {coord_mode!r}")
    pred = predict_ensemble(models, queries)
    scores = hotspot_score(pred.mean, pred.variance, cfg.median_y)
    return HotspotGrid(
        grid=grid,
        mean=pred.mean,
        variance=pred.variance,
        score=scores,
        n_measurements=np.asarray(n_measurements, dtype=np.int64),
    )


def classify(scores: np.ndarray, p_crit: float) -> np.ndarray:
    """Binary hotspot flags: strictly above the critical score.

    Unscored (NaN) tiles are never classified as hotspots.
    """
    scores = np.asarray(scores, dtype=float)
    with np.errstate(invalid="ignore"):
        return scores > p_crit


_HEADER_KEYS = ("min_lat", "max_lat", "min_lon", "max_lon",
                "tile_size", "n_rows", "n_cols")


def write_hotspot_csv(hg: HotspotGrid, stream: IO[str]) -> None:
    """Gridded CSV: a '#'-prefixed grid header block, then one row per tile."""
    g = hg.grid
    header_values = (g.bbox.min_lat, g.bbox.max_lat, g.bbox.min_lon,
                     g.bbox.max_lon, g.tile_size, g.n_rows, g.n_cols)
    for key, value in zip(_HEADER_KEYS, header_values):
        stream.write(f"# {key}={value!r}\n")
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["j", "row", "col", "lat", "lon", "mean", "variance",
                     "score", "n_measurements"])
    cents = centroids(g)
    for j in range(g.n_tiles):
        row, col = g.row_col(j)
        score = hg.score[j]
        writer.writerow([
            j, row, col, repr(cents[j, 0]), repr(cents[j, 1]),
            repr(float(hg.mean[j])), repr(float(hg.variance[j])),
            "" if np.isnan(score) else repr(float(score)),
            int(hg.n_measurements[j]),
        ])


def read_hotspot_csv(stream: IO[str]) -> HotspotGrid:
    """Read back a gridded CSV produced by :func:`write_hotspot_csv`."""
    header: dict[str, float] = {}
    position = stream.tell()
    while True:
        line = stream.readline()
        if not line.startswith("#"):
            stream.seek(position)
            break
        key, _, value = line[1:].strip().partition("=")
        header[key.strip()] = float(value)
        position = stream.tell()
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise DataError(f"gridded CSV is missing header keys: {missing}")
    grid = TileGrid(
        bbox=BoundingBox(header["min_lat"], header["max_lat"],
                         header["min_lon"], header["max_lon"]),
        tile_size=header["tile_size"],
        n_rows=int(header["n_rows"]),
        n_cols=int(header["n_cols"]),
    )
    mean = np.full(grid.n_tiles, np.nan)
    variance = np.full(grid.n_tiles, np.nan)
    score = np.full(grid.n_tiles, np.nan)
    counts = np.zeros(grid.n_tiles, dtype=np.int64)
    reader = csv.DictReader(stream)
    seen = 0
    for row in reader:
        j = int(row["j"])
        mean[j] = float(row["mean"])
        variance[j] = float(row["variance"])
        score[j] = float(row["score"]) if row["score"] else np.nan
        counts[j] = int(row["n_measurements"])
        seen += 1
    if seen != grid.n_tiles:
        raise DataError(f"gridded CSV has {seen} rows for {grid.n_tiles} tiles")
    return HotspotGrid(grid=grid, mean=mean, variance=variance,
                       score=score, n_measurements=counts)


def write_hotspot_geojson(hg: HotspotGrid, stream: IO[str]) -> None:
    """Tile polygons with score properties, as a GeoJSON FeatureCollection."""
    g = hg.grid
    features = []
    for j in range(g.n_tiles):
        row, col = g.row_col(j)
        lat0 = g.bbox.min_lat + row * g.dlat
        lon0 = g.bbox.min_lon + col * g.dlon
        ring = [
            [lon0, lat0],
            [lon0 + g.dlon, lat0],
            [lon0 + g.dlon, lat0 + g.dlat],
            [lon0, lat0 + g.dlat],
            [lon0, lat0],
        ]
        score = hg.score[j]
        features.append({
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": [ring]},
            "properties": {
                "j": j,
                "h": None if np.isnan(score) else float(score),
                "mean": float(hg.mean[j]),
                "variance": float(hg.variance[j]),
                "n_measurements": int(hg.n_measurements[j]),
            },
        })
    json.dump({"type": "FeatureCollection", "features": features},
              stream, sort_keys=True, separators=(",", ":"))
    stream.write("\n")
