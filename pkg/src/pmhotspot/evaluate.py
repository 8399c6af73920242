"""Ground-truth evaluation and probability calibration.

Provides the day-based train/test split, Spearman rank correlation
against a ground-truth surface, reliability binning with Brier score and
expected calibration error, and an isotonic (pool-adjacent-violators)
recalibration of the scores.

ECE weights each bin by its share of the test observations, so the
weights sum to one and empty bins contribute nothing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import IO, Sequence

import numpy as np

from pmhotspot.errors import DataError
from pmhotspot.hotspot import HotspotGrid

N_BINS = 10


@dataclass(frozen=True)
class DaySplit:
    """Calendar-date partition; observations are never split within a day."""

    test_days: frozenset
    train_days: frozenset


def observation_dates(timestamps: np.ndarray) -> np.ndarray:
    """UTC calendar date string for each timestamp."""
    days = (np.asarray(timestamps, dtype=float) // 86400).astype(np.int64)
    unique, inverse = np.unique(days, return_inverse=True)
    labels = np.array([
        datetime.fromtimestamp(d * 86400, tz=timezone.utc).strftime("%Y-%m-%d")
        for d in unique
    ])
    return labels[inverse]


def split_days(timestamps: np.ndarray, n_test_days: int,
               rng: np.random.Generator) -> DaySplit:
    """Uniformly draw n_test_days distinct dates as the test set."""
    dates = sorted(set(observation_dates(timestamps)))
    if n_test_days < 0:
        raise ValueError("n_test_days must be non-negative")
    if len(dates) < n_test_days:
        raise DataError(
            f"need at least {n_test_days} distinct dates, found {len(dates)}")
    chosen = rng.choice(len(dates), size=n_test_days, replace=False)
    test = frozenset(dates[i] for i in chosen)
    return DaySplit(test_days=test, train_days=frozenset(dates) - test)


def in_test_split(timestamps: np.ndarray, split: DaySplit) -> np.ndarray:
    dates = observation_dates(timestamps)
    return np.isin(dates, sorted(split.test_days))


def rank_vector(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned their average rank."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(a: np.ndarray, b: np.ndarray) -> float | None:
    """Spearman rank correlation; None when either input is constant."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("spearman needs two equal-length vectors of size >= 2")
    ra, rb = rank_vector(a), rank_vector(b)
    sa, sb = ra.std(), rb.std()
    if sa == 0.0 or sb == 0.0:
        return None
    return float(np.mean((ra - ra.mean()) * (rb - rb.mean())) / (sa * sb))


def spearman_filtered(scores: np.ndarray, truth: np.ndarray,
                      n_measurements: np.ndarray, threshold: int) -> float | None:
    """Spearman over tiles with n_measurements strictly above ``threshold``."""
    keep = np.asarray(n_measurements) > threshold
    if keep.sum() < 2:
        return None
    return spearman(np.asarray(scores)[keep], np.asarray(truth)[keep])


@dataclass(frozen=True)
class CalibrationBin:
    """One reliability bin: score interval, occupancy, and its two means."""

    index: int          # 1-based
    lower: float        # exclusive, except bin 1 which includes 0
    upper: float        # inclusive
    count: int
    conf: float         # mean score of members (NaN when empty)
    exc: float          # exceedance proportion of members (NaN when empty)


def bin_indices(scores: np.ndarray) -> np.ndarray:
    """Bin 1..10 per score: [0, 0.1], then (0.1, 0.2] ... (0.9, 1.0]."""
    scores = np.asarray(scores, dtype=float)
    if np.any((scores < 0) | (scores > 1)):
        raise ValueError("scores must lie in [0, 1]")
    k = np.ceil(scores * N_BINS).astype(np.int64)
    return np.clip(k, 1, N_BINS)


def reliability(scores: np.ndarray, labels: np.ndarray,
                ) -> tuple[list[CalibrationBin], int]:
    """Group observations into the ten score bins.

    NaN scores (observations in unscored tiles) are excluded and counted
    in the second return value.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    valid = ~np.isnan(scores)
    n_excluded = int((~valid).sum())
    scores, labels = scores[valid], labels[valid]
    which = bin_indices(scores) if len(scores) else np.empty(0, np.int64)
    bins = []
    for k in range(1, N_BINS + 1):
        members = which == k
        count = int(members.sum())
        bins.append(CalibrationBin(
            index=k,
            lower=(k - 1) / N_BINS,
            upper=k / N_BINS,
            count=count,
            conf=float(scores[members].mean()) if count else float("nan"),
            exc=float(labels[members].mean()) if count else float("nan"),
        ))
    return bins, n_excluded


def brier(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean squared error between scores and binary exceedance labels."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if len(scores) == 0:
        raise DataError("brier score of an empty test set")
    return float(np.mean((scores - labels) ** 2))


def ece(bins: Sequence[CalibrationBin], n: int) -> float:
    """Count-weighted mean absolute gap between exceedance and confidence."""
    if n <= 0:
        raise ValueError("total count must be positive")
    total = 0.0
    for b in bins:
        if b.count:
            total += (b.count / n) * abs(b.exc - b.conf)
    return total


@dataclass(frozen=True)
class IsotonicModel:
    """Monotone non-decreasing step fit, applied by linear interpolation.

    ``breakpoints`` are ascending score values (block edges); ``fitted``
    the corresponding non-decreasing probabilities.  Outside the fitted
    range, predictions clamp to the end blocks.
    """

    breakpoints: np.ndarray
    fitted: np.ndarray

    def __post_init__(self):
        if len(self.breakpoints) != len(self.fitted) or len(self.breakpoints) == 0:
            raise ValueError("breakpoints and fitted values must align and be non-empty")
        if np.any(np.diff(self.breakpoints) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if np.any(np.diff(self.fitted) < 0):
            raise ValueError("fitted values must be non-decreasing")


def isotonic_fit(scores: np.ndarray, targets: np.ndarray) -> IsotonicModel:
    """Least-squares monotone fit by pool-adjacent-violators.

    Pairs are sorted by score; ties in score are merged first (weighted
    mean of targets).  Returns the block representation used for
    interpolation.
    """
    scores = np.asarray(scores, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if len(scores) != len(targets) or len(scores) < 2:
        raise ValueError("isotonic fit needs >= 2 (score, target) pairs")

    order = np.argsort(scores, kind="stable")
    xs, ys = scores[order], targets[order]
    # merge exact ties in x
    ux, inverse, counts = np.unique(xs, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=ys)
    means = sums / counts
    weights = counts.astype(float)

    # pool adjacent violators over the tie-merged sequence
    block_value: list[float] = []
    block_weight: list[float] = []
    block_first: list[int] = []  # index into ux of the block's first point
    block_last: list[int] = []
    for i in range(len(ux)):
        block_value.append(float(means[i]))
        block_weight.append(float(weights[i]))
        block_first.append(i)
        block_last.append(i)
        while len(block_value) > 1 and block_value[-2] > block_value[-1]:
            w = block_weight[-2] + block_weight[-1]
            v = (block_value[-2] * block_weight[-2]
                 + block_value[-1] * block_weight[-1]) / w
            block_value[-2:] = [v]
            block_weight[-2:] = [w]
            block_last[-2:] = [block_last[-1]]
            block_first[-2:] = [block_first[-2]]

    breakpoints: list[float] = []
    fitted: list[float] = []
    for v, first, last in zip(block_value, block_first, block_last):
        breakpoints.append(float(ux[first]))
        fitted.append(v)
        if last != first:
            breakpoints.append(float(ux[last]))
            fitted.append(v)
    return IsotonicModel(breakpoints=np.array(breakpoints), fitted=np.array(fitted))


def isotonic_apply(model: IsotonicModel, scores) -> np.ndarray:
    """Monotone transform of scores; clamps outside the fitted range."""
    out = np.interp(np.asarray(scores, dtype=float),
                    model.breakpoints, model.fitted)
    return np.clip(out, 0.0, 1.0)


def exceedance_labels(noise_free_raw: np.ndarray, baselines: np.ndarray,
                      median_y: float) -> np.ndarray:
    """b = 1 iff the noise-free normalized value strictly exceeds median_y."""
    nf = np.asarray(noise_free_raw, dtype=float) - np.asarray(baselines, dtype=float)
    return (nf > median_y).astype(np.int8)


def scores_for_observations(tiles: np.ndarray, hg: HotspotGrid) -> np.ndarray:
    """Hotspot score of each observation's tile (NaN outside / unscored)."""
    tiles = np.asarray(tiles)
    out = np.full(len(tiles), np.nan)
    inside = (tiles >= 0) & (tiles < hg.grid.n_tiles)
    out[inside] = hg.score[tiles[inside]]
    return out


@dataclass
class CalibrationReport:
    """Before/after-calibration reliability summary on the test split."""

    n_test: int
    n_excluded: int
    bins_raw: list[CalibrationBin]
    brier_raw: float
    ece_raw: float
    bins_calibrated: list[CalibrationBin]
    brier_calibrated: float
    ece_calibrated: float
    isotonic: IsotonicModel


def calibration_report(train_scores: np.ndarray, train_labels: np.ndarray,
                       test_scores: np.ndarray, test_labels: np.ndarray,
                       ) -> CalibrationReport:
    """Fit isotonic calibration on training pairs, evaluate on the test split."""
    model = isotonic_fit(train_scores, train_labels)
    valid = ~np.isnan(np.asarray(test_scores, dtype=float))
    ts = np.asarray(test_scores, dtype=float)[valid]
    tl = np.asarray(test_labels, dtype=float)[valid]
    n_excluded = int((~valid).sum())
    if len(ts) == 0:
        raise DataError("no test observations fall in scored tiles")
    bins_raw, _ = reliability(ts, tl)
    calibrated = isotonic_apply(model, ts)
    bins_cal, _ = reliability(calibrated, tl)
    n = len(ts)
    return CalibrationReport(
        n_test=n,
        n_excluded=n_excluded,
        bins_raw=bins_raw,
        brier_raw=brier(ts, tl),
        ece_raw=ece(bins_raw, n),
        bins_calibrated=bins_cal,
        brier_calibrated=brier(calibrated, tl),
        ece_calibrated=ece(bins_cal, n),
        isotonic=model,
    )


def write_calibration_csv(report: CalibrationReport, stream: IO[str]) -> None:
    """Reliability-diagram data: per-bin bounds, counts, conf and exc."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["stage", "bin", "lower", "upper", "count", "conf", "exc"])
    for stage, bins in (("raw", report.bins_raw),
                        ("calibrated", report.bins_calibrated)):
        for b in bins:
            writer.writerow([
                stage, b.index, repr(b.lower), repr(b.upper), b.count,
                "" if b.count == 0 else repr(b.conf),
                "" if b.count == 0 else repr(b.exc),
            ])
