"""Tests for diurnal profiles, exceedance rates, and tile counts."""

import io
import math

import numpy as np
import pytest

from pmhotspot.diagnostics import (
    diurnal_profile,
    exceedance_rate,
    tile_counts,
    write_diurnal_csv,
    write_tile_counts_csv,
)
from pmhotspot.errors import DataError
from pmhotspot.grid import BoundingBox, make_grid
from pmhotspot.ingest import RawRecord

M_PER_DEG = 6371008.8 * math.pi / 180.0


def rec(ts, pm25=40.0, lat=-1.95, lon=30.05):
    return RawRecord("d1", ts, lat, lon, pm25, 5.0)


class TestDiurnalProfile:
    def test_single_record_single_bucket(self):
        # 08:07 UTC falls in the 08:00-08:15 bucket (index 32)
        profile = diurnal_profile([rec(8 * 3600 + 7 * 60.0)])
        assert profile.count[32] == 1
        assert profile.count.sum() == 1
        assert profile.mean[32] == 40.0
        assert np.isnan(profile.mean[31])

    def test_constant_values_zero_sd(self):
        records = [rec(i * 600.0, 25.0) for i in range(144)]
        profile = diurnal_profile(records)
        occupied = profile.count > 0
        np.testing.assert_array_equal(profile.sd[occupied], 0.0)

    def test_counts_conserved(self):
        rng = np.random.default_rng(0)
        records = [rec(float(t), float(v)) for t, v in
                   zip(rng.uniform(0, 7 * 86400, 500), rng.uniform(0, 100, 500))]
        profile = diurnal_profile(records)
        assert profile.count.sum() == 500
        by_day = diurnal_profile(records, by_weekday=True)
        assert by_day.count.sum() == 500

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(1)
        records = [rec(float(t), float(v)) for t, v in
                   zip(rng.uniform(0, 86400, 1000), rng.uniform(10, 90, 1000))]
        profile = diurnal_profile(records)
        groups: dict[int, list[float]] = {}
        for r in records:
            groups.setdefault(int((r.timestamp % 86400) // 900), []).append(r.pm25)
        for b, values in groups.items():
            mean = sum(values) / len(values)
            sd = math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))
            assert profile.mean[b] == pytest.approx(mean, rel=1e-9)
            assert profile.sd[b] == pytest.approx(sd, rel=1e-9, abs=1e-12)

    def test_utc_offset_shifts_buckets(self):
        profile = diurnal_profile([rec(0.0)], utc_offset_hours=2.0)
        assert profile.count[8] == 1  # 02:00 local

    def test_weekday_assignment(self):
        # epoch day 0 was a Thursday (weekday 3), day 4 a Monday (0)
        profile = diurnal_profile([rec(0.0), rec(4 * 86400.0)], by_weekday=True)
        assert profile.count[3].sum() == 1
        assert profile.count[0].sum() == 1


class TestExceedanceRate:
    def test_threshold_below_min(self):
        assert exceedance_rate([rec(0, 20.0), rec(1, 30.0)], 10.0) == 1.0

    def test_threshold_above_max(self):
        assert exceedance_rate([rec(0, 20.0), rec(1, 30.0)], 31.0) == 0.0

    def test_strict_inequality(self):
        assert exceedance_rate([rec(0, 15.0), rec(1, 15.1)], 15.0) == 0.5

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(2)
        records = [rec(float(i), float(v)) for i, v in enumerate(rng.uniform(0, 100, 300))]
        rates = [exceedance_rate(records, t) for t in np.linspace(0, 100, 21)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            exceedance_rate([], 15.0)


class TestTileCounts:
    def grid(self):
        d = 600.0 / M_PER_DEG
        return make_grid(BoundingBox(0.0, d, 0.0, d), tile_size=200.0)

    def test_all_in_one_tile(self):
        grid = self.grid()
        lat = grid.bbox.min_lat + 0.5 * grid.dlat
        lon = grid.bbox.min_lon + 0.5 * grid.dlon
        counts, outside = tile_counts([rec(float(i), lat=lat, lon=lon)
                                       for i in range(5)], grid)
        assert counts[0] == 5
        assert counts.sum() == 5
        assert outside == 0

    def test_conservation_with_outside_points(self):
        grid = self.grid()
        rng = np.random.default_rng(3)
        records = [rec(float(i), lat=rng.uniform(-0.001, 0.009),
                       lon=rng.uniform(-0.001, 0.009)) for i in range(400)]
        counts, outside = tile_counts(records, grid)
        assert counts.sum() + outside == 400

    def test_empty(self):
        counts, outside = tile_counts([], self.grid())
        assert counts.sum() == 0 and outside == 0


class TestCsvOutputs:
    def test_diurnal_csv(self):
        profile = diurnal_profile([rec(8 * 3600.0)])
        buf = io.StringIO()
        write_diurnal_csv(profile, buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "bucket,start,mean,sd,count"
        assert len(lines) == 1 + 96
        assert "08:00" in buf.getvalue()

    def test_diurnal_weekday_csv(self):
        profile = diurnal_profile([rec(0.0)], by_weekday=True)
        buf = io.StringIO()
        write_diurnal_csv(profile, buf)
        assert len(buf.getvalue().splitlines()) == 1 + 7 * 96

    def test_tile_counts_csv(self):
        grid = TestTileCounts().grid()
        counts, outside = tile_counts([rec(0.0, lat=grid.bbox.min_lat + 1e-5,
                                           lon=grid.bbox.min_lon + 1e-5)], grid)
        buf = io.StringIO()
        write_tile_counts_csv(counts, outside, grid, buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "# out_of_bbox=0"
        assert lines[1] == "j,row,col,count"
        assert lines[2] == "0,0,0,1"
