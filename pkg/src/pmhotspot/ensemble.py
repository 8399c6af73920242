"""Bagged GP fits on biased subsamples, and prediction combination.

A single exact GP costs O(n^3), which is prohibitive at mobile-sensing
scale, so B models are fit to subsamples of size m << n and their
predictions averaged.  Subsampling is deliberately biased: tiles are
ranked by their median normalized value, and observations in the most-
and least-polluted tile fractions receive a higher sampling weight so
that suspected hotspots and coldspots stay well represented.

The combined variance is the average per-model variance plus the spread
of the per-model means, so disagreement between models widens the
predictive distribution.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from pmhotspot import gp
from pmhotspot.errors import DataError, NumericalError
from pmhotspot.gp import FitOptions, GPModel, KernelParams

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplingWeights:
    """Extra sampling weight (1 + p) for the extreme tile fractions.

    The top r_high fraction of tiles by median value gets relative
    weight 1 + p_high per observation, the bottom r_low fraction gets
    1 + p_low, everything else weight 1.  ``extreme_odds``, when set,
    replaces both 1 + p weights with an explicit inclusion-odds ratio
    (e.g. 1.5 for strictly 50% more likely).
    """

    p_high: float = 0.3
    p_low: float = 0.3
    r_high: float = 0.2
    r_low: float = 0.2
    extreme_odds: float | None = None

    def __post_init__(self):
        for name in ("p_high", "p_low"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        for name in ("r_high", "r_low"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.r_high + self.r_low > 1.0:
            raise ValueError("r_high + r_low must not exceed 1")
        if self.extreme_odds is not None and self.extreme_odds <= 0:
            raise ValueError("extreme_odds must be positive")

    def weight_high(self) -> float:
        return self.extreme_odds if self.extreme_odds is not None else 1.0 + self.p_high

    def weight_low(self) -> float:
        return self.extreme_odds if self.extreme_odds is not None else 1.0 + self.p_low


@dataclass(frozen=True)
class EnsembleConfig:
    """Bag size, subsample size, sampling bias, and the master seed."""

    n_models: int = 100
    subsample_size: int = 2000
    weights: SamplingWeights = field(default_factory=SamplingWeights)
    seed: int = 0
    max_failure_fraction: float = 0.1

    def __post_init__(self):
        if self.n_models < 1:
            raise ValueError("n_models must be at least 1")
        if self.subsample_size < 2:
            raise ValueError("subsample_size must be at least 2")


@dataclass(frozen=True)
class EnsemblePrediction:
    """Combined mean/variance plus the per-model means for diagnostics."""

    mean: np.ndarray
    variance: np.ndarray
    per_model_means: np.ndarray  # shape (B, ...) matching mean


def observation_weights(y: np.ndarray, tiles: np.ndarray,
                        weights: SamplingWeights) -> np.ndarray:
    """Per-observation sampling weight from the tile ranking by median y."""
    y = np.asarray(y, dtype=float)
    tiles = np.asarray(tiles)
    if tiles.size == 0:
        return np.ones(0)
    order = np.argsort(tiles, kind="stable")
    sorted_tiles = tiles[order]
    boundaries = np.flatnonzero(np.diff(sorted_tiles)) + 1
    unique_tiles = sorted_tiles[np.r_[0, boundaries]]
    medians = np.array([np.median(g) for g in np.split(y[order], boundaries)])
    # ascending by (median, tile id): deterministic under median ties
    rank = np.lexsort((unique_tiles, medians))
    n_tiles = len(unique_tiles)
    n_low = int(weights.r_low * n_tiles)
    n_high = int(weights.r_high * n_tiles)
    tile_weight = np.ones(n_tiles)
    tile_weight[rank[:n_low]] = weights.weight_low()
    if n_high:
        tile_weight[rank[n_tiles - n_high:]] = weights.weight_high()
    return tile_weight[np.searchsorted(unique_tiles, tiles)]


def biased_subsample(y: np.ndarray, tiles: np.ndarray, m: int,
                     weights: SamplingWeights, rng: np.random.Generator,
                     precomputed_weights: np.ndarray | None = None) -> np.ndarray:
    """Indices of m observations sampled without replacement by tile weight.

    Uses exponential sort keys (Efraimidis-Spirakis), which is
    distribution-equivalent to weight-proportional sequential draws.
    Returned indices are sorted ascending, so m = n reproduces the full
    dataset in input order.
    """
    n = len(np.asarray(y))
    if m > n:
        raise DataError(f"subsample size {m} exceeds available observations {n}")
    w = (precomputed_weights if precomputed_weights is not None
         else observation_weights(y, tiles, weights))
    keys = rng.exponential(1.0, size=n) / w
    selected = np.argpartition(keys, m - 1)[:m] if m < n else np.arange(n)
    return np.sort(selected)


def fit_ensemble(
    X: np.ndarray,
    y: np.ndarray,
    tiles: np.ndarray,
    cfg: EnsembleConfig,
    fit_opts: FitOptions | None = None,
    fixed_params: KernelParams | None = None,
    norm: str = "l1",
    n_jobs: int = 1,
) -> list[GPModel]:
    """Fit B independent GP models on B biased subsamples.

    Per-model seeds derive deterministically from cfg.seed, so results
    are identical for any n_jobs.  Individual fit failures are logged
    and tolerated up to max_failure_fraction of the bag.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    n = len(y)
    if cfg.subsample_size > n:
        raise DataError(f"subsample size {cfg.subsample_size} exceeds dataset size {n}")

    sampling_weights = observation_weights(y, tiles, cfg.weights)
    seed_seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.n_models)
    jobs = []
    for b, ss in enumerate(seed_seqs):
        rng = np.random.default_rng(ss)
        idx = biased_subsample(y, tiles, cfg.subsample_size, cfg.weights, rng,
                               precomputed_weights=sampling_weights)
        opts = fit_opts or FitOptions()
        opts = FitOptions(restarts=opts.restarts, max_iter=opts.max_iter,
                          grad_tol=opts.grad_tol, seed=int(ss.generate_state(1)[0]),
                          log_bounds=opts.log_bounds)
        jobs.append((b, idx, opts))

    def fit_one(job):
        b, idx, opts = job
        try:
            if fixed_params is not None:
                return b, gp.fit(X[idx], y[idx], init=fixed_params, norm=norm,
                                 optimize_params=False)
            return b, gp.fit(X[idx], y[idx], opts=opts, norm=norm)
        except NumericalError as exc:
            logger.warning("ensemble member %d failed: %s", b, exc)
            return b, None

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(fit_one, jobs))
    else:
        results = [fit_one(job) for job in jobs]

    results.sort(key=lambda r: r[0])
    models = [model for _, model in results if model is not None]
    n_failed = cfg.n_models - len(models)
    if n_failed > cfg.max_failure_fraction * cfg.n_models:
        raise NumericalError(
            f"{n_failed}/{cfg.n_models} ensemble members failed "
            f"(tolerance {cfg.max_failure_fraction:.0%})")
    return models


def combine(means: np.ndarray, variances: np.ndarray) -> EnsemblePrediction:
    """Average B per-model predictions into one.

    mean = (1/B) sum mu_b; variance = (1/B) sum var_b +
    (1/B) sum (mu_b - mean)^2.  Arrays are (B,) or (B, n_points).
    """
    means = np.atleast_1d(np.asarray(means, dtype=float))
    variances = np.atleast_1d(np.asarray(variances, dtype=float))
    if means.shape != variances.shape or means.shape[0] < 1:
        raise ValueError("means and variances must agree on (B, ...) shape")
    mu = means.mean(axis=0)
    spread = ((means - mu) ** 2).mean(axis=0)
    return EnsemblePrediction(mean=mu, variance=variances.mean(axis=0) + spread,
                              per_model_means=means)


def predict_ensemble(models: list[GPModel], queries: np.ndarray,
                     chunk_size: int = 4096) -> EnsemblePrediction:
    """Combined prediction of all bag members at each query point."""
    if not models:
        raise ValueError("predict_ensemble needs at least one model")
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    means = np.empty((len(models), queries.shape[0]))
    variances = np.empty_like(means)
    for b, model in enumerate(models):
        means[b], variances[b] = gp.predict(model, queries, chunk_size)
    return combine(means, variances)
