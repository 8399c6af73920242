"""Parsing and cleaning of raw mobile-sensor CSV records.

Cleaning applies a fixed sequence of drop rules, each accounted for in
CleaningStats so that retained + dropped always equals the input count:

    1. exact duplicates (all fields equal)
    2. missing measurement value
    3. outside the spatial bounding box
    4. outside the date range
    5. per-device per-second duplicates (first kept)
    6. zero recorded speed
    7. implausibly high readings (outliers)
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from typing import IO, Iterable, Sequence

from pmhotspot.errors import DataError
from pmhotspot.grid import BoundingBox

REQUIRED_COLUMNS = ("device_id", "timestamp", "lat", "lon")
OPTIONAL_COLUMNS = ("pm25", "speed", "rh", "temp")

DEFAULT_COLUMN_MAP = {name: name for name in REQUIRED_COLUMNS + OPTIONAL_COLUMNS}


@dataclass(frozen=True)
class RawRecord:
    """One timestamped, geolocated reading from one device.

    ``timestamp`` is UTC seconds since the epoch.  ``pm25`` may be None
    when the reading is missing from the row (dropped later by clean).
    """

    device_id: str
    timestamp: float
    lat: float
    lon: float
    pm25: float | None
    speed: float | None = None
    rh: float | None = None
    temp: float | None = None


@dataclass(frozen=True)
class CleaningConfig:
    """Thresholds for the drop rules; None disables the matching filter."""

    bbox: BoundingBox | None = None
    date_range: tuple[float, float] | None = None  # [start, end) UTC seconds
    pm25_max: float = 500.0
    drop_zero_speed: bool = True

    def __post_init__(self):
        if self.pm25_max <= 0:
            raise ValueError("pm25_max must be positive")
        if self.date_range is not None and not self.date_range[0] < self.date_range[1]:
            raise ValueError("date_range start must precede end")


@dataclass
class CleaningStats:
    """Per-rule drop counts; sums with ``retained`` to the input count."""

    input_count: int = 0
    duplicate: int = 0
    missing_field: int = 0
    out_of_bbox: int = 0
    out_of_date: int = 0
    per_second_duplicate: int = 0
    zero_speed: int = 0
    outlier: int = 0
    retained: int = 0

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def total_dropped(self) -> int:
        return self.input_count - self.retained


@dataclass(frozen=True)
class ParseDiagnostic:
    """A malformed row that produced no record."""

    line: int
    reason: str


def parse_timestamp(text: str) -> float:
    """UTC seconds from an ISO-8601 string or a numeric epoch value.

    Naive datetimes are interpreted as UTC.
    """
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    iso = text.replace("Z", "+00:00")
    try:
        dt = datetime.fromisoformat(iso)
    except ValueError as exc:
        raise ValueError(f"unparseable timestamp {text!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def format_timestamp(ts: float) -> str:
    """ISO-8601 UTC rendering used in all output CSVs."""
    dt = datetime.fromtimestamp(ts, tz=timezone.utc)
    if ts == int(ts):
        return dt.strftime("%Y-%m-%dT%H:%M:%SZ")
    return dt.strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def _float_or_none(value: str | None) -> float | None:
    if value is None or value.strip() == "":
        return None
    return float(value)


def parse_records(
    stream: IO[str] | IO[bytes],
    column_map: dict[str, str] | None = None,
) -> tuple[list[RawRecord], list[ParseDiagnostic]]:
    """Parse a CSV stream into records plus diagnostics for bad rows.

    The header must name the identifier, timestamp (or separate date and
    time columns mapped via ``column_map``), latitude and longitude
    columns; otherwise a DataError is raised.  Rows missing any of those
    fields, or with unparseable values, yield a diagnostic instead of a
    record.  A missing pm25 value is tolerated here and dropped later by
    :func:`clean`.
    """
    colmap = dict(DEFAULT_COLUMN_MAP)
    if column_map:
        colmap.update(column_map)
    if isinstance(stream.read(0), bytes):
        stream = io.TextIOWrapper(stream, encoding="utf-8")

    reader = csv.DictReader(stream)
    if reader.fieldnames is None:
        return [], []  # empty input: nothing to parse, nothing to report
    header = set(reader.fieldnames)

    split_datetime = "date" in colmap and "time" in colmap and colmap["timestamp"] not in header
    needed = [colmap[c] for c in ("device_id", "lat", "lon")]
    needed += [colmap["date"], colmap["time"]] if split_datetime else [colmap["timestamp"]]
    missing = [c for c in needed if c not in header]
    if missing:
        raise DataError(f"input CSV header is missing required columns: {missing}")

    records: list[RawRecord] = []
    diagnostics: list[ParseDiagnostic] = []
    for line_no, row in enumerate(reader, start=2):
        try:
            device = (row.get(colmap["device_id"]) or "").strip()
            if split_datetime:
                date_s = (row.get(colmap["date"]) or "").strip()
                time_s = (row.get(colmap["time"]) or "").strip()
                ts_text = f"{date_s}T{time_s}" if date_s and time_s else ""
            else:
                ts_text = (row.get(colmap["timestamp"]) or "").strip()
            lat = _float_or_none(row.get(colmap["lat"]))
            lon = _float_or_none(row.get(colmap["lon"]))
            if not device or not ts_text or lat is None or lon is None:
                diagnostics.append(ParseDiagnostic(line_no, "missing required field"))
                continue
            ts = parse_timestamp(ts_text)
            pm25 = _float_or_none(row.get(colmap["pm25"]))
            if pm25 is not None and (not math.isfinite(pm25) or pm25 < 0):
                diagnostics.append(ParseDiagnostic(line_no, f"invalid pm25 {pm25}"))
                continue
            if not (math.isfinite(ts) and math.isfinite(lat) and math.isfinite(lon)):
                diagnostics.append(ParseDiagnostic(line_no, "non-finite value"))
                continue
            records.append(RawRecord(
                device_id=device, timestamp=ts, lat=lat, lon=lon, pm25=pm25,
                speed=_float_or_none(row.get(colmap["speed"])),
                rh=_float_or_none(row.get(colmap["rh"])),
                temp=_float_or_none(row.get(colmap["temp"])),
            ))
        except ValueError as exc:
            diagnostics.append(ParseDiagnostic(line_no, str(exc)))
    return records, diagnostics


def clean(records: Sequence[RawRecord], cfg: CleaningConfig) -> tuple[list[RawRecord], CleaningStats]:
    """Apply the drop rules in their fixed order, preserving input order."""
    stats = CleaningStats(input_count=len(records))

    seen_exact: set[tuple] = set()
    seen_second: set[tuple[str, int]] = set()
    kept: list[RawRecord] = []
    for rec in records:
        key = (rec.device_id, rec.timestamp, rec.lat, rec.lon,
               rec.pm25, rec.speed, rec.rh, rec.temp)
        if key in seen_exact:
            stats.duplicate += 1
            continue
        seen_exact.add(key)
        if rec.pm25 is None:
            stats.missing_field += 1
            continue
        if cfg.bbox is not None and not cfg.bbox.contains(rec.lat, rec.lon):
            stats.out_of_bbox += 1
            continue
        if cfg.date_range is not None and not (cfg.date_range[0] <= rec.timestamp < cfg.date_range[1]):
            stats.out_of_date += 1
            continue
        sec_key = (rec.device_id, math.floor(rec.timestamp))
        if sec_key in seen_second:
            stats.per_second_duplicate += 1
            continue
        seen_second.add(sec_key)
        if cfg.drop_zero_speed and rec.speed == 0:
            stats.zero_speed += 1
            continue
        if rec.pm25 > cfg.pm25_max:
            stats.outlier += 1
            continue
        kept.append(rec)
    stats.retained = len(kept)
    return kept, stats


RECORD_CSV_COLUMNS = ("device_id", "timestamp", "lat", "lon", "pm25", "speed", "rh", "temp")


def write_records_csv(records: Iterable[RawRecord], stream: IO[str]) -> None:
    """Write records in the canonical schema (ISO timestamps, '.' decimal)."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(RECORD_CSV_COLUMNS)
    for rec in records:
        writer.writerow([
            rec.device_id,
            format_timestamp(rec.timestamp),
            repr(rec.lat),
            repr(rec.lon),
            "" if rec.pm25 is None else repr(rec.pm25),
            "" if rec.speed is None else repr(rec.speed),
            "" if rec.rh is None else repr(rec.rh),
            "" if rec.temp is None else repr(rec.temp),
        ])


def read_records_csv(stream: IO[str], column_map: dict[str, str] | None = None) -> list[RawRecord]:
    """Read a canonical records CSV, failing hard on any malformed row."""
    records, diagnostics = parse_records(stream, column_map)
    if diagnostics:
        first = diagnostics[0]
        raise DataError(
            f"{len(diagnostics)} malformed rows (first at line {first.line}: {first.reason})")
    return records
