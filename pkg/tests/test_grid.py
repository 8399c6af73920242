"""Tests for the projection and tile-grid module."""

import math

import numpy as np
import pytest

from pmhotspot.grid import (
    EARTH_RADIUS_M,
    BoundingBox,
    GeoPoint,
    LocalXY,
    centroid,
    centroids,
    make_grid,
    project,
    project_arrays,
    tile_indices,
    tile_of,
    unproject,
)


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    """Independent great-circle distance oracle."""
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlmb = math.radians(b.lon - a.lon)
    s = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(math.sqrt(s))


class TestProjection:
    def test_identity_at_origin(self):
        xy = project(GeoPoint(0, 0), GeoPoint(0, 0))
        assert xy == LocalXY(0.0, 0.0)

    def test_equator_arc_length(self):
        # 0.001 deg of longitude at the equator is 111.195 m of arc
        xy = project(GeoPoint(0, 0.001), GeoPoint(0, 0))
        assert xy.x == pytest.approx(111.19508023353292, abs=1e-6)
        assert xy.y == 0.0

    def test_kigali_scale_lat_shift(self):
        origin = GeoPoint(-1.944, 30.06)
        p = GeoPoint(-1.944 + 0.0018, 30.06)
        xy = project(p, origin)
        assert xy.y == pytest.approx(200.15114442035926, abs=1e-6)
        assert xy.x == 0.0

    def test_out_of_range_latitude_rejected(self):
        with pytest.raises(ValueError):
            project(GeoPoint(86.0, 0.0), GeoPoint(0, 0))
        with pytest.raises(ValueError):
            GeoPoint(95.0, 0.0)
        with pytest.raises(ValueError):
            GeoPoint(0.0, 190.0)

    def test_unproject_round_trip(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            origin = GeoPoint(rng.uniform(-60, 60), rng.uniform(-179, 179))
            p = GeoPoint(origin.lat + rng.uniform(-0.05, 0.05),
                         origin.lon + rng.uniform(-0.05, 0.05))
            xy = project(p, origin)
            back = unproject(xy, origin)
            back_xy = project(back, origin)
            assert abs(back_xy.x - xy.x) < 1e-6
            assert abs(back_xy.y - xy.y) < 1e-6

    def test_isometry_against_haversine(self):
        # pairwise projected distances track great-circle distances within
        # 0.5% for points up to 5 km apart at |lat| <= 60
        rng = np.random.default_rng(42)
        for _ in range(200):
            lat0 = rng.uniform(-60, 60)
            lon0 = rng.uniform(-170, 170)
            origin = GeoPoint(lat0, lon0)
            scale = 2500.0 / (EARTH_RADIUS_M * math.pi / 180.0)
            p = GeoPoint(lat0 + rng.uniform(-scale, scale),
                         lon0 + rng.uniform(-scale, scale) / math.cos(math.radians(lat0)))
            q = GeoPoint(lat0 + rng.uniform(-scale, scale),
                         lon0 + rng.uniform(-scale, scale) / math.cos(math.radians(lat0)))
            d_true = haversine_m(p, q)
            if d_true < 1.0:
                continue
            pxy, qxy = project(p, origin), project(q, origin)
            d_proj = math.hypot(pxy.x - qxy.x, pxy.y - qxy.y)
            assert d_proj == pytest.approx(d_true, rel=5e-3)

    def test_project_arrays_matches_scalar(self):
        origin = GeoPoint(-1.95, 30.05)
        lats = np.array([-1.95, -1.90, -2.00])
        lons = np.array([30.05, 30.10, 30.00])
        xy = project_arrays(lats, lons, origin)
        for i in range(3):
            s = project(GeoPoint(lats[i], lons[i]), origin)
            assert xy[i, 0] == pytest.approx(s.x, abs=1e-9)
            assert xy[i, 1] == pytest.approx(s.y, abs=1e-9)


def square_bbox_m(side_m: float, lat0: float = 0.0, lon0: float = 0.0) -> BoundingBox:
    """Bounding box of a given physical size, built by inverting the projection."""
    dlat = side_m / (EARTH_RADIUS_M * math.pi / 180.0)
    return BoundingBox(lat0, lat0 + dlat, lon0, lon0 + side_m /
                       (EARTH_RADIUS_M * math.pi / 180.0) / math.cos(math.radians(lat0)))


class TestMakeGrid:
    def test_exact_division(self):
        grid = make_grid(square_bbox_m(600.0), tile_size=200.0)
        assert (grid.n_rows, grid.n_cols) == (3, 3)

    def test_ceiling_rule(self):
        dlat = 600.0 / (EARTH_RADIUS_M * math.pi / 180.0)
        dlon = 610.0 / (EARTH_RADIUS_M * math.pi / 180.0)
        bbox = BoundingBox(0.0, dlat, 0.0, dlon)
        grid = make_grid(bbox, tile_size=200.0)
        assert (grid.n_rows, grid.n_cols) == (3, 4)

    def test_kigali_bbox_dimensions(self):
        bbox = BoundingBox(-2.16, -1.85, 29.90, 30.25)
        grid = make_grid(bbox, tile_size=200.0)
        # oracle: arc lengths at the corner origin divided by tile size
        m_per_deg = EARTH_RADIUS_M * math.pi / 180.0
        rows = math.ceil((bbox.max_lat - bbox.min_lat) * m_per_deg / 200.0)
        cols = math.ceil((bbox.max_lon - bbox.min_lon) * m_per_deg
                         * math.cos(math.radians(bbox.min_lat)) / 200.0)
        assert (grid.n_rows, grid.n_cols) == (rows, cols) == (173, 195)

    def test_degenerate_bbox_rejected(self):
        with pytest.raises(ValueError):
            BoundingBox(1.0, 1.0, 0.0, 1.0)
        with pytest.raises(ValueError):
            make_grid(square_bbox_m(100.0), tile_size=0.0)


class TestTileMembership:
    def test_centroid_of_first_tile(self):
        grid = make_grid(square_bbox_m(600.0), tile_size=200.0)
        assert tile_of(grid, centroid(grid, 0)) == 0

    def test_shared_edge_goes_to_lower_index(self):
        grid = make_grid(square_bbox_m(600.0), tile_size=200.0)
        edge_lon = grid.bbox.min_lon + grid.dlon  # between col 0 and col 1
        mid_lat = grid.bbox.min_lat + 0.5 * grid.dlat
        assert tile_of(grid, GeoPoint(mid_lat, edge_lon)) == 0
        edge_lat = grid.bbox.min_lat + grid.dlat  # between row 0 and row 1
        mid_lon = grid.bbox.min_lon + 0.5 * grid.dlon
        assert tile_of(grid, GeoPoint(edge_lat, mid_lon)) == 0

    def test_outside_bbox_is_none(self):
        grid = make_grid(square_bbox_m(600.0), tile_size=200.0)
        assert tile_of(grid, GeoPoint(grid.bbox.max_lat + 0.01, grid.bbox.min_lon)) is None
        assert tile_of(grid, GeoPoint(grid.bbox.min_lat, grid.bbox.min_lon - 0.01)) is None

    def test_bbox_corners_belong_to_corner_tiles(self):
        grid = make_grid(square_bbox_m(600.0), tile_size=200.0)
        assert tile_of(grid, GeoPoint(grid.bbox.min_lat, grid.bbox.min_lon)) == 0
        assert tile_of(grid, GeoPoint(grid.bbox.max_lat, grid.bbox.max_lon)) == grid.n_tiles - 1

    def test_partition_property(self):
        # every in-bbox point maps to exactly one valid index
        grid = make_grid(square_bbox_m(1000.0, lat0=-1.95, lon0=30.0), tile_size=130.0)
        rng = np.random.default_rng(3)
        lats = rng.uniform(grid.bbox.min_lat, grid.bbox.max_lat, 10_000)
        lons = rng.uniform(grid.bbox.min_lon, grid.bbox.max_lon, 10_000)
        idx = tile_indices(grid, lats, lons)
        assert np.all(idx >= 0)
        assert np.all(idx < grid.n_tiles)

    def test_vectorized_matches_scalar(self):
        grid = make_grid(square_bbox_m(700.0), tile_size=150.0)
        rng = np.random.default_rng(11)
        lats = rng.uniform(grid.bbox.min_lat - 0.001, grid.bbox.max_lat + 0.001, 500)
        lons = rng.uniform(grid.bbox.min_lon - 0.001, grid.bbox.max_lon + 0.001, 500)
        vec = tile_indices(grid, lats, lons)
        for i in range(500):
            scalar = tile_of(grid, GeoPoint(lats[i], lons[i]))
            assert vec[i] == (-1 if scalar is None else scalar)


class TestCentroids:
    def test_single_tile_grid_center(self):
        bbox = square_bbox_m(100.0)
        grid = make_grid(bbox, tile_size=500.0)
        assert (grid.n_rows, grid.n_cols) == (1, 1)
        c = centroid(grid, 0)
        assert c.lat == pytest.approx((bbox.min_lat + bbox.max_lat) / 2)
        assert c.lon == pytest.approx((bbox.min_lon + bbox.max_lon) / 2)

    def test_center_tile_of_3x3_is_bbox_center(self):
        bbox = square_bbox_m(600.0)
        grid = make_grid(bbox, tile_size=200.0)
        c = centroid(grid, 4)
        assert c.lat == pytest.approx((bbox.min_lat + bbox.max_lat) / 2)
        assert c.lon == pytest.approx((bbox.min_lon + bbox.max_lon) / 2)

    def test_round_trip_every_tile(self):
        grid = make_grid(square_bbox_m(950.0, lat0=40.0, lon0=116.0), tile_size=140.0)
        for j in range(grid.n_tiles):
            assert tile_of(grid, centroid(grid, j)) == j

    def test_centroids_array_matches_scalar(self):
        grid = make_grid(square_bbox_m(800.0), tile_size=190.0)
        arr = centroids(grid)
        assert arr.shape == (grid.n_tiles, 2)
        for j in range(grid.n_tiles):
            c = centroid(grid, j)
            assert arr[j, 0] == pytest.approx(c.lat, abs=1e-12)
            assert arr[j, 1] == pytest.approx(c.lon, abs=1e-12)

    def test_index_out_of_range(self):
        grid = make_grid(square_bbox_m(600.0), tile_size=200.0)
        with pytest.raises(ValueError):
            centroid(grid, grid.n_tiles)
