"""Descriptive statistics over raw readings: diurnal profiles, exceedance
rates against health thresholds, and per-tile measurement counts.

All statistics are computed on raw concentrations, not normalized values;
time-of-day bucketing honors a configurable UTC offset for local-time
reporting.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from pmhotspot.errors import DataError
from pmhotspot.grid import TileGrid, tile_indices
from pmhotspot.ingest import RawRecord
from pmhotspot.normalize import time_of_day_bucket


@dataclass(frozen=True)
class DiurnalProfile:
    """Per time-of-day bucket: mean, population sd, and count of readings.

    Arrays are (n_buckets,) or, when split by weekday, (7, n_buckets)
    with Monday at row 0.  Empty buckets carry NaN mean/sd and count 0.
    """

    bucket_minutes: float
    utc_offset_hours: float
    by_weekday: bool
    mean: np.ndarray
    sd: np.ndarray
    count: np.ndarray

    @property
    def n_buckets(self) -> int:
        return self.mean.shape[-1]


def _bucket_stats(values: np.ndarray, buckets: np.ndarray, n_buckets: int):
    count = np.bincount(buckets, minlength=n_buckets).astype(np.int64)
    sums = np.bincount(buckets, weights=values, minlength=n_buckets)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, sums / np.maximum(count, 1), np.nan)
        sq = np.bincount(buckets, weights=(values - mean[buckets]) ** 2,
                         minlength=n_buckets)
        sd = np.where(count > 0, np.sqrt(sq / np.maximum(count, 1)), np.nan)
    mean[count == 0] = np.nan
    return mean, sd, count


def diurnal_profile(records: Sequence[RawRecord], utc_offset_hours: float = 0.0,
                    by_weekday: bool = False,
                    bucket_minutes: float = 15.0) -> DiurnalProfile:
    """Bucket raw readings by local time of day and summarize each bucket."""
    n_buckets = int(round(24 * 60 / bucket_minutes))
    t = np.array([r.timestamp for r in records])
    values = np.array([r.pm25 for r in records], dtype=float)
    buckets = (time_of_day_bucket(t, bucket_minutes, utc_offset_hours)
               if len(records) else np.empty(0, np.int64))
    if not by_weekday:
        mean, sd, count = _bucket_stats(values, buckets, n_buckets)
        return DiurnalProfile(bucket_minutes, utc_offset_hours, False, mean, sd, count)

    local_days = ((t + utc_offset_hours * 3600.0) // 86400.0).astype(np.int64)
    weekdays = (local_days + 3) % 7  # epoch day 0 was a Thursday; Monday = 0
    mean = np.full((7, n_buckets), np.nan)
    sd = np.full((7, n_buckets), np.nan)
    count = np.zeros((7, n_buckets), dtype=np.int64)
    for day in range(7):
        mask = weekdays == day
        mean[day], sd[day], count[day] = _bucket_stats(
            values[mask], buckets[mask], n_buckets)
    return DiurnalProfile(bucket_minutes, utc_offset_hours, True, mean, sd, count)


def exceedance_rate(records: Sequence[RawRecord], threshold: float) -> float:
    """Fraction of readings strictly above ``threshold``."""
    if not records:
        raise DataError("exceedance rate of an empty dataset")
    values = np.array([r.pm25 for r in records], dtype=float)
    return float(np.mean(values > threshold))


def tile_counts(records: Sequence[RawRecord], grid: TileGrid,
                ) -> tuple[np.ndarray, int]:
    """Measurements per tile, plus the count falling outside the bbox."""
    if not records:
        return np.zeros(grid.n_tiles, dtype=np.int64), 0
    lats = np.array([r.lat for r in records])
    lons = np.array([r.lon for r in records])
    idx = tile_indices(grid, lats, lons)
    inside = idx >= 0
    counts = np.bincount(idx[inside], minlength=grid.n_tiles).astype(np.int64)
    return counts, int((~inside).sum())


def write_diurnal_csv(profile: DiurnalProfile, stream: IO[str]) -> None:
    """One row per (weekday,) bucket: start time, mean, sd, count."""
    writer = csv.writer(stream, lineterminator="\n")
    minutes = profile.bucket_minutes
    if profile.by_weekday:
        writer.writerow(["weekday", "bucket", "start", "mean", "sd", "count"])
        for day in range(7):
            for b in range(profile.n_buckets):
                writer.writerow([
                    day, b, _bucket_start(b, minutes),
                    _cell(profile.mean[day, b]), _cell(profile.sd[day, b]),
                    int(profile.count[day, b]),
                ])
    else:
        writer.writerow(["bucket", "start", "mean", "sd", "count"])
        for b in range(profile.n_buckets):
            writer.writerow([
                b, _bucket_start(b, minutes),
                _cell(profile.mean[b]), _cell(profile.sd[b]),
                int(profile.count[b]),
            ])


def write_tile_counts_csv(counts: np.ndarray, out_of_bbox: int, grid: TileGrid,
                          stream: IO[str]) -> None:
    stream.write(f"# out_of_bbox={out_of_bbox}\n")
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["j", "row", "col", "count"])
    for j in range(grid.n_tiles):
        row, col = grid.row_col(j)
        writer.writerow([j, row, col, int(counts[j])])


def _bucket_start(bucket: int, bucket_minutes: float) -> str:
    total = int(bucket * bucket_minutes)
    return f"{total // 60:02d}:{total % 60:02d}"


def _cell(value: float) -> str:
    return "" if np.isnan(value) else repr(float(value))
