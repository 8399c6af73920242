"""Route-based mobile-sensing simulator over a road graph and ground truth.

Journeys are shortest on-road paths between random on-road endpoints
(edge chosen proportional to length, offset uniform).  Observations sit
at uniform arc-length intervals along each journey, timestamped one
second apart from a random start time.  Each observation gets

    y_raw = hm_t * truth[tile] + spike + gauss_noise

where hm_t is an hourly multiplier derived from a stationary reference
series, the spike term is a Bernoulli-gated Gamma draw modelling passing
exhaust plumes, and the Gaussian term models measurement noise.  The
noise-free value (everything except the Gaussian term) is retained so
that calibration analyses have ground truth per observation.

Noise streams are split per route from the master seed, so chunked or
parallel generation agrees byte-for-byte with a serial run.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import IO, Sequence

import networkx as nx
import numpy as np

from pmhotspot.errors import DataError
from pmhotspot.grid import GeoPoint, BoundingBox, TileGrid, project, tile_indices
from pmhotspot.ingest import format_timestamp, parse_timestamp

logger = logging.getLogger(__name__)

DEFAULT_OBSERVATION_SPACING_M = 8.33  # 30 km/h at one reading per second


class RoadGraph:
    """Undirected road network with per-edge lengths in meters.

    Edge lengths, when supplied, must agree with the projected endpoint
    distance within 1%; omitted lengths are computed from the node
    coordinates.  The graph may be disconnected.
    """

    def __init__(self, nodes: dict[str, GeoPoint],
                 edges: Sequence[tuple[str, str, float | None]]):
        if not nodes:
            raise DataError("road graph has no nodes")
        self.nodes = dict(nodes)
        self.graph = nx.Graph()
        for node_id, point in self.nodes.items():
            self.graph.add_node(node_id)
        self.edges: list[tuple[str, str, float]] = []
        for a, b, length in edges:
            if a not in self.nodes or b not in self.nodes:
                raise DataError(f"edge ({a}, {b}) references unknown node")
            if a == b:
                raise DataError(f"self-loop edge at node {a}")
            geo_len = self._projected_distance(a, b)
            if length is None:
                length = geo_len
            elif length <= 0 or abs(length - geo_len) > 0.01 * max(geo_len, 1e-9):
                raise DataError(
                    f"edge ({a}, {b}) length {length:.2f} m deviates more than 1% "
                    f"from the projected endpoint distance {geo_len:.2f} m")
            self.graph.add_edge(a, b, length=float(length))
            self.edges.append((a, b, float(length)))
        if not self.edges:
            raise DataError("road graph has no edges")
        self._edge_lengths = np.array([e[2] for e in self.edges])
        self._cum_lengths = np.cumsum(self._edge_lengths)
        self._component_of = {}
        for i, comp in enumerate(nx.connected_components(self.graph)):
            for node in comp:
                self._component_of[node] = i

    def _projected_distance(self, a: str, b: str) -> float:
        xy = project(self.nodes[b], origin=self.nodes[a])
        return math.hypot(xy.x, xy.y)

    @property
    def total_length(self) -> float:
        return float(self._cum_lengths[-1])

    def random_road_point(self, rng: np.random.Generator) -> tuple[int, float]:
        """(edge index, offset m) uniform over the total road length."""
        s = rng.uniform(0.0, self.total_length)
        edge_idx = int(np.searchsorted(self._cum_lengths, s, side="right"))
        edge_idx = min(edge_idx, len(self.edges) - 1)
        prev = self._cum_lengths[edge_idx - 1] if edge_idx else 0.0
        return edge_idx, float(s - prev)


@dataclass(frozen=True)
class Route:
    """Journey geometry: a lat/lon polyline with segment lengths in meters."""

    vertices: np.ndarray       # (k, 2) [lat, lon]
    segment_lengths: np.ndarray  # (k-1,)

    @property
    def length(self) -> float:
        return float(self.segment_lengths.sum()) if len(self.segment_lengths) else 0.0

    def point_at(self, arc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Interpolated (lat, lon) at the given arc-length offsets."""
        cum = np.concatenate([[0.0], np.cumsum(self.segment_lengths)])
        lat = np.interp(arc, cum, self.vertices[:, 0])
        lon = np.interp(arc, cum, self.vertices[:, 1])
        return lat, lon


def _interior_point(graph: RoadGraph, edge_idx: int, offset: float) -> tuple[GeoPoint, str, str, float, float]:
    a, b, length = graph.edges[edge_idx]
    frac = 0.0 if length == 0 else offset / length
    pa, pb = graph.nodes[a], graph.nodes[b]
    point = GeoPoint(pa.lat + frac * (pb.lat - pa.lat),
                     pa.lon + frac * (pb.lon - pa.lon))
    return point, a, b, offset, length - offset


def _route_between(graph: RoadGraph,
                   start: tuple[int, float], end: tuple[int, float]) -> Route:
    """Shortest on-road path between two interior points.

    The interior points are temporarily inserted as graph nodes tied to
    their edge endpoints (plus a direct segment when both points share
    an edge), so one Dijkstra run covers all traversal choices.
    """
    g = graph.graph
    p_start, sa, sb, s_to_a, s_to_b = _interior_point(graph, *start)
    p_end, ea, eb, e_to_a, e_to_b = _interior_point(graph, *end)
    temp = {"__start__": p_start, "__end__": p_end}
    g.add_edge("__start__", sa, length=s_to_a)
    g.add_edge("__start__", sb, length=s_to_b)
    g.add_edge("__end__", ea, length=e_to_a)
    g.add_edge("__end__", eb, length=e_to_b)
    if start[0] == end[0]:
        g.add_edge("__start__", "__end__", length=abs(start[1] - end[1]))
    try:
        path = nx.shortest_path(g, "__start__", "__end__", weight="length")
        lengths = [g[u][v]["length"] for u, v in zip(path, path[1:])]
    finally:
        g.remove_node("__start__")
        g.remove_node("__end__")

    coords = []
    for node in path:
        p = temp.get(node) or graph.nodes[node]
        coords.append((p.lat, p.lon))
    return Route(vertices=np.array(coords, dtype=float),
                 segment_lengths=np.array(lengths, dtype=float))


def sample_routes(graph: RoadGraph, n_pairs: int, rng: np.random.Generator,
                  max_retries_per_pair: int = 50) -> list[Route]:
    """Shortest-path journeys between n_pairs random on-road point pairs.

    Endpoint pairs landing in different graph components are redrawn; a
    pair that exhausts its retry budget raises a DataError.
    """
    routes: list[Route] = []
    for _ in range(n_pairs):
        for attempt in range(max_retries_per_pair + 1):
            start = graph.random_road_point(rng)
            end = graph.random_road_point(rng)
            comp_start = graph._component_of[graph.edges[start[0]][0]]
            comp_end = graph._component_of[graph.edges[end[0]][0]]
            if comp_start == comp_end:
                routes.append(_route_between(graph, start, end))
                break
        else:
            raise DataError(
                f"could not draw a connected endpoint pair in "
                f"{max_retries_per_pair} retries; the road graph is too fragmented")
    return routes


@dataclass
class PlacedPoints:
    """Observation locations and timestamps, flattened across routes."""

    route_id: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    t: np.ndarray

    def __len__(self) -> int:
        return len(self.t)


def place_observations(routes: Sequence[Route], spacing_m: float,
                       period: tuple[float, float],
                       rng: np.random.Generator) -> PlacedPoints:
    """Points every ``spacing_m`` meters along each route, one second apart.

    Each route's first timestamp is drawn uniformly (whole seconds) from
    ``period``; a zero-length route yields a single point.
    """
    if spacing_m <= 0:
        raise ValueError("spacing must be positive")
    start, end = period
    if not start < end:
        raise ValueError("period start must precede end")
    starts = rng.integers(int(start), int(end), size=len(routes))
    route_ids, lats, lons, times = [], [], [], []
    for rid, (route, t0) in enumerate(zip(routes, starts)):
        # epsilon absorbs cumulative-length rounding at the final point
        n_points = int(route.length / spacing_m + 1e-9) + 1
        arc = np.arange(n_points) * spacing_m
        lat, lon = route.point_at(arc)
        route_ids.append(np.full(n_points, rid, dtype=np.int64))
        lats.append(lat)
        lons.append(lon)
        times.append(t0 + np.arange(n_points, dtype=float))
    return PlacedPoints(
        route_id=np.concatenate(route_ids) if route_ids else np.empty(0, np.int64),
        lat=np.concatenate(lats) if lats else np.empty(0),
        lon=np.concatenate(lons) if lons else np.empty(0),
        t=np.concatenate(times) if times else np.empty(0),
    )


@dataclass(frozen=True)
class GroundTruthRaster:
    """Fully-populated per-tile mean values on a TileGrid."""

    grid: TileGrid
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) != self.grid.n_tiles:
            raise ValueError("raster must populate every tile")
        if np.any(~np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("raster values must be finite and non-negative")


def load_raster(stream: IO[str], grid: TileGrid) -> GroundTruthRaster:
    """Raster CSV (row, col, pm25) onto ``grid``; every tile exactly once."""
    values = np.full(grid.n_tiles, np.nan)
    reader = csv.DictReader(stream)
    for line in reader:
        row, col = int(line["row"]), int(line["col"])
        if not (0 <= row < grid.n_rows and 0 <= col < grid.n_cols):
            raise DataError(f"raster cell ({row}, {col}) outside grid")
        j = row * grid.n_cols + col
        if not np.isnan(values[j]):
            raise DataError(f"raster cell ({row}, {col}) appears twice")
        values[j] = float(line["pm25"])
    if np.any(np.isnan(values)):
        missing = int(np.isnan(values).sum())
        raise DataError(f"raster leaves {missing} tiles unpopulated")
    return GroundTruthRaster(grid=grid, values=values)


def write_raster(raster: GroundTruthRaster, stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["row", "col", "pm25"])
    for j in range(raster.grid.n_tiles):
        row, col = raster.grid.row_col(j)
        writer.writerow([row, col, repr(float(raster.values[j]))])


class HourlyMultipliers:
    """Station series divided by its overall median, keyed by epoch hour.

    Hours absent from the series inherit the value of the same hour of
    day on the nearest available day (earlier day wins ties); each such
    fallback is logged once.
    """

    def __init__(self, by_hour: dict[int, float]):
        if not by_hour:
            raise DataError("hourly multiplier table is empty")
        self._by_hour = dict(by_hour)
        self._fallback_cache: dict[int, float] = {}

    @classmethod
    def from_series(cls, timestamps: np.ndarray, values: np.ndarray) -> "HourlyMultipliers":
        timestamps = np.asarray(timestamps, dtype=float)
        values = np.asarray(values, dtype=float)
        if len(values) == 0:
            raise DataError("station series is empty")
        if np.any(values <= 0):
            raise DataError("station series contains non-positive values")
        med = float(np.median(values))
        if med <= 0:
            raise DataError("station series median must be positive")
        by_hour: dict[int, float] = {}
        for ts, value in zip(timestamps, values):
            by_hour[int(ts // 3600)] = float(value) / med
        return cls(by_hour)

    def lookup(self, t: float) -> float:
        hour = int(t // 3600)
        direct = self._by_hour.get(hour)
        if direct is not None:
            return direct
        cached = self._fallback_cache.get(hour)
        if cached is not None:
            return cached
        for day_offset in range(1, 400):
            for candidate in (hour - 24 * day_offset, hour + 24 * day_offset):
                value = self._by_hour.get(candidate)
                if value is not None:
                    logger.warning(
                        "no multiplier for hour %d; using same hour %d days %s",
                        hour, day_offset, "earlier" if candidate < hour else "later")
                    self._fallback_cache[hour] = value
                    return value
        raise DataError(f"no hourly multiplier within 400 days of epoch hour {hour}")

    def lookup_many(self, t: np.ndarray) -> np.ndarray:
        hours = (np.asarray(t, dtype=float) // 3600).astype(np.int64)
        unique, inverse = np.unique(hours, return_inverse=True)
        table = np.array([self.lookup(h * 3600.0) for h in unique])
        return table[inverse]


def read_station_series(stream: IO[str]) -> tuple[np.ndarray, np.ndarray]:
    """Station CSV (timestamp, pm25) as parallel arrays."""
    reader = csv.DictReader(stream)
    ts, vals = [], []
    for row in reader:
        ts.append(parse_timestamp(row["timestamp"]))
        vals.append(float(row["pm25"]))
    return np.array(ts), np.array(vals)


@dataclass(frozen=True)
class SimNoiseConfig:
    """Stochastic interference: rare additive spikes plus Gaussian noise.

    gamma_mode selects the Gamma parameterization: "shape_scale"
    (default, mean = shape * scale) or "shape_rate" (mean = shape/rate,
    the second parameter then being a rate).
    """

    spike_prob: float = 0.05
    gamma_shape: float = 5.0
    gamma_scale: float = 5.0
    gauss_sd: float = 1.0
    seed: int = 0
    gamma_mode: str = "shape_scale"

    def __post_init__(self):
        if not 0.0 <= self.spike_prob <= 1.0:
            raise ValueError("spike_prob must be in [0, 1]")
        if self.gamma_shape <= 0 or self.gamma_scale <= 0 or self.gauss_sd <= 0:
            raise ValueError("gamma_shape, gamma_scale and gauss_sd must be positive")
        if self.gamma_mode not in ("shape_scale", "shape_rate"):
            raise ValueError("gamma_mode must be 'shape_scale' or 'shape_rate'")

    @property
    def effective_gamma_scale(self) -> float:
        return self.gamma_scale if self.gamma_mode == "shape_scale" else 1.0 / self.gamma_scale


@dataclass
class SimulatedData:
    """Synthesized observations with their noise-free values and tiles."""

    route_id: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    t: np.ndarray
    tile: np.ndarray
    noise_free_raw: np.ndarray
    y_raw: np.ndarray

    def __len__(self) -> int:
        return len(self.t)


def synthesize(points: PlacedPoints, raster: GroundTruthRaster,
               multipliers: HourlyMultipliers, noise: SimNoiseConfig) -> SimulatedData:
    """Assign a measurement to every placed point.

    Every point must fall inside the raster bbox.  Noise is drawn from a
    per-route stream derived from (noise.seed, route id), in point order
    within the route.
    """
    tiles = tile_indices(raster.grid, points.lat, points.lon)
    outside = np.flatnonzero(tiles < 0)
    if outside.size:
        i = outside[0]
        raise DataError(
            f"{outside.size} points outside the raster bbox; first at "
            f"(lat={points.lat[i]!r}, lon={points.lon[i]!r})")
    hm = multipliers.lookup_many(points.t)
    base = hm * raster.values[tiles]

    spikes = np.empty(len(points))
    gauss = np.empty(len(points))
    scale = noise.effective_gamma_scale
    for rid in np.unique(points.route_id):
        mask = points.route_id == rid
        n = int(mask.sum())
        rng = np.random.default_rng([noise.seed, int(rid)])
        kappa = rng.random(n) < noise.spike_prob
        gamma = rng.gamma(noise.gamma_shape, scale, n)
        spikes[mask] = np.where(kappa, gamma, 0.0)
        gauss[mask] = rng.normal(0.0, noise.gauss_sd, n)

    noise_free = base + spikes
    return SimulatedData(
        route_id=points.route_id.copy(), lat=points.lat.copy(),
        lon=points.lon.copy(), t=points.t.copy(), tile=tiles,
        noise_free_raw=noise_free, y_raw=noise_free + gauss,
    )


def simulate_campaign(graph: RoadGraph, raster: GroundTruthRaster,
                      multipliers: HourlyMultipliers, n_pairs: int,
                      period: tuple[float, float], noise: SimNoiseConfig,
                      seed: int, spacing_m: float = DEFAULT_OBSERVATION_SPACING_M,
                      ) -> SimulatedData:
    """Full synthetic campaign: routes, placement, then measurement synthesis."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    routes = sample_routes(graph, n_pairs, rng)
    points = place_observations(routes, spacing_m, period, rng)
    return synthesize(points, raster, multipliers, noise)


SIM_CSV_COLUMNS = ("device_id", "timestamp", "lat", "lon", "pm25",
                   "speed", "rh", "temp", "noise_free_raw", "tile")


def write_sim_csv(data: SimulatedData, stream: IO[str],
                  speed_m_s: float = DEFAULT_OBSERVATION_SPACING_M) -> None:
    """Ingest-schema CSV plus the simulation-only columns."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(SIM_CSV_COLUMNS)
    for i in range(len(data)):
        writer.writerow([
            f"sim{int(data.route_id[i]):06d}",
            format_timestamp(float(data.t[i])),
            repr(float(data.lat[i])), repr(float(data.lon[i])),
            repr(float(data.y_raw[i])), repr(speed_m_s), "", "",
            repr(float(data.noise_free_raw[i])), int(data.tile[i]),
        ])


def read_sim_csv(stream: IO[str]) -> SimulatedData:
    reader = csv.DictReader(stream)
    rows = {"route_id": [], "lat": [], "lon": [], "t": [],
            "tile": [], "noise_free_raw": [], "y_raw": []}
    for row in reader:
        rows["route_id"].append(int(row["device_id"].removeprefix("sim")))
        rows["t"].append(parse_timestamp(row["timestamp"]))
        rows["lat"].append(float(row["lat"]))
        rows["lon"].append(float(row["lon"]))
        rows["y_raw"].append(float(row["pm25"]))
        rows["noise_free_raw"].append(float(row["noise_free_raw"]))
        rows["tile"].append(int(row["tile"]))
    return SimulatedData(
        route_id=np.array(rows["route_id"], dtype=np.int64),
        lat=np.array(rows["lat"]), lon=np.array(rows["lon"]),
        t=np.array(rows["t"]), tile=np.array(rows["tile"], dtype=np.int64),
        noise_free_raw=np.array(rows["noise_free_raw"]),
        y_raw=np.array(rows["y_raw"]),
    )


def grid_road_graph(bbox: BoundingBox, street_spacing_m: float) -> RoadGraph:
    """Synthetic rectilinear street grid spanning a bounding box.

    Useful for desk-scale simulations and tests; for real cities,
    convert a map extract to the node/edge CSV schema instead.
    """
    if street_spacing_m <= 0:
        raise ValueError("street_spacing_m must be positive")
    origin = bbox.origin
    width = project(GeoPoint(bbox.min_lat, bbox.max_lon), origin).x
    height = project(GeoPoint(bbox.max_lat, bbox.min_lon), origin).y
    n_cols = max(2, round(width / street_spacing_m) + 1)
    n_rows = max(2, round(height / street_spacing_m) + 1)
    lats = np.linspace(bbox.min_lat, bbox.max_lat, n_rows)
    lons = np.linspace(bbox.min_lon, bbox.max_lon, n_cols)
    nodes = {
        f"n{r}_{c}": GeoPoint(float(lats[r]), float(lons[c]))
        for r in range(n_rows) for c in range(n_cols)
    }
    edges: list[tuple[str, str, float | None]] = []
    for r in range(n_rows):
        for c in range(n_cols):
            if c + 1 < n_cols:
                edges.append((f"n{r}_{c}", f"n{r}_{c + 1}", None))
            if r + 1 < n_rows:
                edges.append((f"n{r}_{c}", f"n{r + 1}_{c}", None))
    return RoadGraph(nodes, edges)


def load_road_graph(nodes_stream: IO[str], edges_stream: IO[str]) -> RoadGraph:
    """Road graph from node (id, lat, lon) and edge (a, b[, length]) CSVs."""
    nodes: dict[str, GeoPoint] = {}
    for row in csv.DictReader(nodes_stream):
        nodes[row["id"].strip()] = GeoPoint(float(row["lat"]), float(row["lon"]))
    edges: list[tuple[str, str, float | None]] = []
    for row in csv.DictReader(edges_stream):
        length = row.get("length")
        edges.append((row["a"].strip(), row["b"].strip(),
                      float(length) if length not in (None, "") else None))
    return RoadGraph(nodes, edges)
