"""Background normalization against the fleet-wide rolling median.

Each observation's baseline is the median of all devices' raw readings in
the trailing closed window [t_i - x_w, t_i], which always contains the
observation itself.  Subtracting it removes the hour-to-hour drift in
ambient levels so that readings from different times are comparable.

The median is maintained incrementally with two heaps and lazy deletion,
costing O(log w) per insert/evict for window occupancy w.
"""

from __future__ import annotations

import csv
import heapq
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from pmhotspot.errors import DataError
from pmhotspot.ingest import RawRecord, format_timestamp, parse_timestamp


@dataclass(frozen=True)
class NormalizationConfig:
    """Window length for the rolling baseline, in minutes."""

    window_minutes: float = 15.0

    def __post_init__(self):
        if self.window_minutes <= 0:
            raise ValueError("window_minutes must be positive")

    @property
    def window_seconds(self) -> float:
        return self.window_minutes * 60.0


@dataclass(frozen=True)
class NormalizedObservation(RawRecord):
    """A raw record with its baseline and normalized value y = pm25 - baseline."""

    baseline: float = 0.0
    y: float = 0.0


class RollingMedian:
    """Order-statistics structure: two heaps with lazy deletion.

    ``lo`` is a max-heap (negated values) holding the lower half, kept
    one element larger than ``hi`` when the count is odd.  Removed
    values are deferred in ``_delayed`` until they surface at a heap
    top, so arbitrary-value removal stays O(log w) amortized.
    """

    def __init__(self):
        self._lo: list[float] = []  # negated
        self._hi: list[float] = []
        self._delayed: dict[float, int] = {}
        self._lo_size = 0
        self._hi_size = 0

    def __len__(self) -> int:
        return self._lo_size + self._hi_size

    def add(self, value: float) -> None:
        if self._lo_size == 0 or value <= -self._lo[0]:
            heapq.heappush(self._lo, -value)
            self._lo_size += 1
        else:
            heapq.heappush(self._hi, value)
            self._hi_size += 1
        self._rebalance()

    def remove(self, value: float) -> None:
        self._delayed[value] = self._delayed.get(value, 0) + 1
        if self._lo_size > 0 and value <= -self._lo[0]:
            self._lo_size -= 1
            if value == -self._lo[0]:
                self._prune(self._lo, -1)
        else:
            self._hi_size -= 1
            if self._hi and value == self._hi[0]:
                self._prune(self._hi, 1)
        self._rebalance()

    def median(self) -> float:
        if len(self) == 0:
            raise ValueError("median of empty window")
        if (self._lo_size + self._hi_size) % 2:
            return -self._lo[0]
        return (-self._lo[0] + self._hi[0]) / 2.0

    def _prune(self, heap: list[float], sign: int) -> None:
        while heap and sign * heap[0] in self._delayed:
            value = sign * heap[0]
            self._delayed[value] -= 1
            if not self._delayed[value]:
                del self._delayed[value]
            heapq.heappop(heap)

    def _rebalance(self) -> None:
        if self._lo_size > self._hi_size + 1:
            self._prune(self._lo, -1)
            heapq.heappush(self._hi, -heapq.heappop(self._lo))
            self._lo_size -= 1
            self._hi_size += 1
            self._prune(self._lo, -1)
        elif self._lo_size < self._hi_size:
            self._prune(self._hi, 1)
            heapq.heappush(self._lo, -heapq.heappop(self._hi))
            self._hi_size -= 1
            self._lo_size += 1
            self._prune(self._hi, 1)


def rolling_baseline_arrays(timestamps: np.ndarray, values: np.ndarray,
                            window_seconds: float) -> np.ndarray:
    """Array-level rolling-median engine; see :func:`rolling_baseline`."""
    timestamps = np.asarray(timestamps, dtype=float)
    values = np.asarray(values, dtype=float)
    n = len(timestamps)
    baselines = np.empty(n, dtype=float)
    if n == 0:
        return baselines
    order = np.argsort(timestamps, kind="stable")

    med = RollingMedian()
    live: deque[tuple[float, float]] = deque()  # (timestamp, value) in time order
    pos = 0
    while pos < n:
        t = timestamps[order[pos]]
        group_end = pos
        while group_end < n and timestamps[order[group_end]] == t:
            group_end += 1
        while live and live[0][0] < t - window_seconds:
            med.remove(live.popleft()[1])
        for k in range(pos, group_end):
            value = values[order[k]]
            live.append((t, value))
            med.add(value)
        group_baseline = med.median()
        baselines[order[pos:group_end]] = group_baseline
        pos = group_end
    return baselines


def rolling_baseline(records: Sequence[RawRecord], cfg: NormalizationConfig) -> np.ndarray:
    """Per-record fleet-wide rolling-median baseline, aligned with input order.

    Records sharing a timestamp see each other in their windows and
    therefore share a baseline.  A stable time sort is applied
    internally, so the input need not be sorted.
    """
    return rolling_baseline_arrays(
        np.array([r.timestamp for r in records]),
        np.array([r.pm25 for r in records], dtype=float),
        cfg.window_seconds,
    )


def sorted_median(values: np.ndarray) -> float:
    """Sort-based median; even counts take the midpoint of the central pair."""
    s = np.sort(np.asarray(values, dtype=float))
    if len(s) == 0:
        raise ValueError("median of an empty set")
    mid = len(s) // 2
    if len(s) % 2:
        return float(s[mid])
    return float((s[mid - 1] + s[mid]) / 2.0)


def normalize(
    records: Sequence[RawRecord], cfg: NormalizationConfig,
) -> tuple[list[NormalizedObservation], float | None]:
    """Subtract the rolling baseline from every record.

    Returns the normalized observations (input order preserved) and the
    empirical median of the normalized values, or None for empty input.
    """
    baselines = rolling_baseline(records, cfg)
    out = [
        NormalizedObservation(
            device_id=r.device_id, timestamp=r.timestamp, lat=r.lat, lon=r.lon,
            pm25=r.pm25, speed=r.speed, rh=r.rh, temp=r.temp,
            baseline=float(b), y=float(r.pm25 - b),
        )
        for r, b in zip(records, baselines)
    ]
    if not out:
        return out, None
    median_y = sorted_median(np.array([o.y for o in out]))
    return out, median_y


NORMALIZED_CSV_COLUMNS = ("device_id", "timestamp", "lat", "lon", "pm25",
                          "speed", "rh", "temp", "baseline", "y")


def write_normalized_csv(observations: Sequence[NormalizedObservation],
                         stream, extras: dict[str, Sequence] | None = None) -> None:
    """Input columns plus baseline and y; ``extras`` append passthrough columns."""
    extras = extras or {}
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(list(NORMALIZED_CSV_COLUMNS) + list(extras))
    for i, o in enumerate(observations):
        row = [
            o.device_id, format_timestamp(o.timestamp), repr(o.lat), repr(o.lon),
            repr(o.pm25),
            "" if o.speed is None else repr(o.speed),
            "" if o.rh is None else repr(o.rh),
            "" if o.temp is None else repr(o.temp),
            repr(o.baseline), repr(o.y),
        ]
        row += [extras[key][i] for key in extras]
        writer.writerow(row)


def read_normalized_csv(stream) -> tuple[list[NormalizedObservation], dict[str, list[str]]]:
    """Read back a normalized CSV; unknown columns return as string extras."""
    reader = csv.DictReader(stream)
    if reader.fieldnames is None:
        return [], {}
    missing = [c for c in NORMALIZED_CSV_COLUMNS if c not in reader.fieldnames]
    if missing:
        raise DataError(f"normalized CSV is missing columns: {missing}")
    extra_cols = [c for c in reader.fieldnames if c not in NORMALIZED_CSV_COLUMNS]
    observations = []
    extras: dict[str, list[str]] = {c: [] for c in extra_cols}
    for row in reader:
        observations.append(NormalizedObservation(
            device_id=row["device_id"],
            timestamp=parse_timestamp(row["timestamp"]),
            lat=float(row["lat"]), lon=float(row["lon"]),
            pm25=float(row["pm25"]),
            speed=float(row["speed"]) if row["speed"] else None,
            rh=float(row["rh"]) if row["rh"] else None,
            temp=float(row["temp"]) if row["temp"] else None,
            baseline=float(row["baseline"]), y=float(row["y"]),
        ))
        for c in extra_cols:
            extras[c].append(row[c])
    return observations, extras


def time_of_day_bucket(timestamps: np.ndarray, bucket_minutes: float = 15.0,
                       utc_offset_hours: float = 0.0) -> np.ndarray:
    """Index of the local time-of-day bucket for each UTC timestamp."""
    local = np.asarray(timestamps, dtype=float) + utc_offset_hours * 3600.0
    seconds_of_day = np.mod(local, 86400.0)
    return np.floor(seconds_of_day / (bucket_minutes * 60.0)).astype(np.int64)


def window_smoothness(
    records: Sequence[RawRecord],
    candidate_windows: Sequence[float],
    bucket_minutes: float = 15.0,
    utc_offset_hours: float = 0.0,
) -> dict[float, float]:
    """Diurnal-profile smoothness score for each candidate window length.

    For each candidate: normalize with that window, average the
    normalized values within time-of-day buckets, and sum the absolute
    differences between consecutive occupied buckets.  Lower means a
    smoother profile; the smallest score identifies the preferred
    window length.
    """
    if not records:
        raise DataError("no records to score")
    timestamps = np.array([r.timestamp for r in records])
    buckets = time_of_day_bucket(timestamps, bucket_minutes, utc_offset_hours)
    if len(np.unique(buckets)) < 2:
        raise DataError("need at least 2 occupied time-of-day buckets")

    scores: dict[float, float] = {}
    for window in candidate_windows:
        normalized, _ = normalize(records, NormalizationConfig(window_minutes=window))
        y = np.array([o.y for o in normalized])
        sums = np.bincount(buckets, weights=y)
        counts = np.bincount(buckets)
        occupied = counts > 0
        means = sums[occupied] / counts[occupied]
        scores[float(window)] = float(np.sum(np.abs(np.diff(means))))
    return scores
