"""Stage compositions: each function implements one CLI subcommand on top
of the library modules, reading and writing the file-based handoffs.

The in-memory cores (``fit_and_score``, ``evaluate_simulation``) are
exposed separately so tests and notebooks can drive them without files.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pmhotspot import diagnostics, evaluate
from pmhotspot.config import (
    PipelineConfig,
    RunMetadata,
    check_upstream_hash,
    config_hash,
    config_snapshot,
    write_metadata,
)
from pmhotspot.ensemble import EnsembleConfig, fit_ensemble
from pmhotspot.errors import DataError
from pmhotspot.evaluate import (
    CalibrationReport,
    calibration_report,
    exceedance_labels,
    in_test_split,
    scores_for_observations,
    spearman,
    spearman_filtered,
    split_days,
)
from pmhotspot.gp import FitOptions
from pmhotspot.grid import TileGrid, make_grid, project_arrays, tile_indices
from pmhotspot.hotspot import (
    HotspotConfig,
    HotspotGrid,
    score_grid,
    write_hotspot_csv,
    write_hotspot_geojson,
)
from pmhotspot.ingest import clean, parse_records, write_records_csv
from pmhotspot.normalize import (
    normalize,
    read_normalized_csv,
    rolling_baseline_arrays,
    sorted_median,
    window_smoothness,
    write_normalized_csv,
)
from pmhotspot.simulate import (
    GroundTruthRaster,
    HourlyMultipliers,
    SimulatedData,
    load_raster,
    load_road_graph,
    read_sim_csv,
    read_station_series,
    simulate_campaign,
    write_sim_csv,
)

logger = logging.getLogger(__name__)


class _StageTimer:
    def __init__(self):
        self.timings: dict[str, float] = {}

    def time(self, name: str):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.timings[name] = round(time.perf_counter() - self.t0, 6)
                return False

        return _Ctx()


def _metadata(config: PipelineConfig, stage: str, timer: _StageTimer,
              **kw) -> RunMetadata:
    return RunMetadata(stage=stage, config_hash=config_hash(config),
                       config=config_snapshot(config),
                       timings_s=timer.timings, **kw)


def run_ingest(config: PipelineConfig) -> dict:
    """Parse, clean, and profile the raw input CSV."""
    timer = _StageTimer()
    raw_path = config.require_path("raw_csv")
    with timer.time("parse"), open(raw_path, encoding="utf-8") as stream:
        records, diags = parse_records(stream, config.column_map)
    with timer.time("clean"):
        kept, stats = clean(records, config.cleaning)

    cleaned_path = config.stage_output("cleaned.csv")
    with timer.time("write"), open(cleaned_path, "w", encoding="utf-8") as out:
        write_records_csv(kept, out)
    with open(config.stage_output("cleaning_stats.txt"), "w", encoding="utf-8") as out:
        for key, value in stats.as_dict().items():
            out.write(f"{key}={value}\n")
        out.write(f"parse_diagnostics={len(diags)}\n")

    with timer.time("diagnostics"):
        grid = make_grid(config.grid.bbox, config.grid.tile_size_m)
        if kept:
            profile = diagnostics.diurnal_profile(
                kept, utc_offset_hours=config.utc_offset_hours)
            with open(config.stage_output("diurnal.csv"), "w", encoding="utf-8") as out:
                diagnostics.write_diurnal_csv(profile, out)
            counts, outside = diagnostics.tile_counts(kept, grid)
            with open(config.stage_output("tile_counts.csv"), "w", encoding="utf-8") as out:
                diagnostics.write_tile_counts_csv(counts, outside, grid, out)

    warnings = [f"line {d.line}: {d.reason}" for d in diags[:50]]
    if len(diags) > 50:
        warnings.append(f"... {len(diags) - 50} further parse diagnostics")
    if not kept:
        warnings.append("no records retained after cleaning")
    meta = _metadata(config, "ingest", timer, warnings=warnings,
                     extra={"cleaning_stats": stats.as_dict()})
    write_metadata(meta, config.stage_output("ingest_metadata.json"))
    return {"retained": stats.retained, "stats": stats, "diagnostics": len(diags)}


def run_normalize(config: PipelineConfig, allow_mismatch: bool = False) -> dict:
    """Subtract the rolling baseline; input is cleaned or simulated CSV."""
    timer = _StageTimer()
    source = config.paths.get("normalize_input") or config.stage_output("cleaned.csv")
    if not source.exists():
        raise DataError(f"normalize input not found: {source} (run ingest first?)")
    warnings = check_upstream_hash(config, config.stage_output("ingest_metadata.json"),
                                   allow_mismatch)
    with timer.time("read"), open(source, encoding="utf-8") as stream:
        records, diags = parse_records(stream, config.column_map)
    if diags:
        raise DataError(f"normalize input has {len(diags)} malformed rows "
                        f"(first at line {diags[0].line}: {diags[0].reason})")
    if sorted(r.timestamp for r in records) != [r.timestamp for r in records]:
        warnings.append("input not time-sorted; sorted internally")

    with timer.time("normalize"):
        observations, median_y = normalize(records, config.normalization)

    with timer.time("write"), open(config.stage_output("normalized.csv"), "w",
                                   encoding="utf-8") as out:
        write_normalized_csv(observations, out)
    meta = _metadata(config, "normalize", timer, median_y=median_y,
                     warnings=warnings)
    write_metadata(meta, config.stage_output("normalize_metadata.json"))
    return {"n": len(observations), "median_y": median_y}


def run_window_sweep(config: PipelineConfig) -> dict[float, float]:
    """Smoothness score per candidate window length, written as CSV."""
    source = config.paths.get("normalize_input") or config.stage_output("cleaned.csv")
    if not source.exists():
        raise DataError(f"window sweep input not found: {source}")
    with open(source, encoding="utf-8") as stream:
        records, diags = parse_records(stream, config.column_map)
    if diags:
        raise DataError(f"window sweep input has {len(diags)} malformed rows")
    scores = window_smoothness(records, config.window_candidates,
                               utc_offset_hours=config.utc_offset_hours)
    with open(config.stage_output("window_sweep.csv"), "w", encoding="utf-8") as out:
        out.write("window_minutes,smoothness\n")
        for window, score in scores.items():
            out.write(f"{window!r},{score!r}\n")
    return scores


@dataclass
class FitScoreResult:
    hotspot_grid: HotspotGrid
    median_y: float
    fitted_params: list[dict]


def fit_and_score(
    lats: np.ndarray,
    lons: np.ndarray,
    y: np.ndarray,
    grid: TileGrid,
    tiles: np.ndarray,
    median_y: float,
    config: PipelineConfig,
) -> FitScoreResult:
    """In-memory core of the fit-score stage."""
    if config.fit.coord_mode == "local_xy":
        X = project_arrays(lats, lons, grid.origin)
    else:
        X = np.column_stack([np.asarray(lats, float), np.asarray(lons, float)])
    inside = tiles >= 0
    if not np.all(inside):
        logger.warning("%d observations outside the grid are excluded from the fit",
                       int((~inside).sum()))
        X, y, tiles = X[inside], y[inside], tiles[inside]
    fit_opts = FitOptions(restarts=config.fit.restarts, max_iter=config.fit.max_iter)
    models = fit_ensemble(X, y, tiles, config.ensemble, fit_opts=fit_opts,
                          norm=config.fit.norm, n_jobs=config.threads)
    counts = np.bincount(tiles, minlength=grid.n_tiles).astype(np.int64)
    hg = score_grid(grid, models,
                    HotspotConfig(median_y=median_y, p_crit=config.p_crit),
                    counts, coord_mode=config.fit.coord_mode)
    fitted = [
        {"variance": m.params.variance, "lengthscale": m.params.lengthscale,
         "noise_variance": m.params.noise_variance, "lml": m.lml,
         "n_training": m.n_training}
        for m in models
    ]
    return FitScoreResult(hotspot_grid=hg, median_y=median_y, fitted_params=fitted)


def run_fit_score(config: PipelineConfig, allow_mismatch: bool = False) -> FitScoreResult:
    """File-based fit-score stage: normalized CSV in, scored grid out."""
    timer = _StageTimer()
    source = config.paths.get("fit_input") or config.stage_output("normalized.csv")
    if not source.exists():
        raise DataError(f"fit-score input not found: {source} (run normalize first?)")
    warnings = check_upstream_hash(
        config, config.stage_output("normalize_metadata.json"), allow_mismatch)
    with timer.time("read"), open(source, encoding="utf-8") as stream:
        observations, _ = read_normalized_csv(stream)
    if not observations:
        raise DataError("no normalized observations to fit")
    grid = make_grid(config.grid.bbox, config.grid.tile_size_m)
    lats = np.array([o.lat for o in observations])
    lons = np.array([o.lon for o in observations])
    y = np.array([o.y for o in observations])
    tiles = tile_indices(grid, lats, lons)
    median_y = sorted_median(y)
    with timer.time("fit_score"):
        result = fit_and_score(lats, lons, y, grid, tiles, median_y, config)

    with timer.time("write"):
        with open(config.stage_output("scores.csv"), "w", encoding="utf-8") as out:
            write_hotspot_csv(result.hotspot_grid, out)
        with open(config.stage_output("scores.geojson"), "w", encoding="utf-8") as out:
            write_hotspot_geojson(result.hotspot_grid, out)
    meta = _metadata(config, "fit_score", timer, median_y=median_y,
                     fitted_params=result.fitted_params, warnings=warnings)
    write_metadata(meta, config.stage_output("fit_score_metadata.json"))
    return result


def run_simulate(config: PipelineConfig) -> SimulatedData:
    """Generate a synthetic campaign from raster + road graph + station series."""
    timer = _StageTimer()
    grid = make_grid(config.grid.bbox, config.grid.tile_size_m)
    with timer.time("load"):
        with open(config.require_path("raster_csv"), encoding="utf-8") as stream:
            raster = load_raster(stream, grid)
        with open(config.require_path("road_nodes_csv"), encoding="utf-8") as nodes, \
                open(config.require_path("road_edges_csv"), encoding="utf-8") as edges:
            graph = load_road_graph(nodes, edges)
        with open(config.require_path("station_csv"), encoding="utf-8") as stream:
            ts, values = read_station_series(stream)
        multipliers = HourlyMultipliers.from_series(ts, values)
    with timer.time("simulate"):
        data = simulate_campaign(
            graph, raster, multipliers,
            n_pairs=config.simulation.n_route_pairs,
            period=config.simulation.period,
            noise=config.sim_noise,
            seed=config.seed,
            spacing_m=config.simulation.spacing_m,
        )
    with timer.time("write"), open(config.stage_output("simulated.csv"), "w",
                                   encoding="utf-8") as out:
        write_sim_csv(data, out, speed_m_s=config.simulation.spacing_m)
    meta = _metadata(config, "simulate", timer,
                     extra={"n_observations": len(data),
                            "n_routes": int(data.route_id.max()) + 1 if len(data) else 0})
    write_metadata(meta, config.stage_output("simulate_metadata.json"))
    return data


@dataclass
class EvaluationResult:
    """Everything the evaluation stage reports for one simulated campaign."""

    hotspot_grid: HotspotGrid
    median_y: float
    spearman_all: float | None
    spearman_by_threshold: dict[int, float | None]
    report: CalibrationReport | None
    n_train: int
    n_test: int
    fitted_params: list[dict] = field(default_factory=list)


def evaluate_simulation(
    data: SimulatedData,
    raster: GroundTruthRaster,
    config: PipelineConfig,
    eval_seed: int | None = None,
) -> EvaluationResult:
    """In-memory evaluation: split days, fit on train, score, calibrate.

    Baselines are computed over the full stream (background correction
    precedes the split); the city median, the GP fit, and the isotonic
    fit use training days only, and metrics are reported on test days.
    """
    grid = raster.grid
    baselines = rolling_baseline_arrays(data.t, data.y_raw,
                                        config.normalization.window_seconds)
    y = data.y_raw - baselines
    rng = np.random.default_rng(config.seed if eval_seed is None else eval_seed)
    split = split_days(data.t, config.evaluation.n_test_days, rng)
    is_test = in_test_split(data.t, split)
    train = ~is_test
    if not np.any(train):
        raise DataError("day split left no training observations")
    median_y = sorted_median(y[train])
    labels = exceedance_labels(data.noise_free_raw, baselines, median_y)

    result = fit_and_score(data.lat[train], data.lon[train], y[train], grid,
                           data.tile[train], median_y, config)
    hg = result.hotspot_grid
    rho = spearman(hg.score, raster.values)
    by_threshold = {
        t: spearman_filtered(hg.score, raster.values, hg.n_measurements, t)
        for t in config.evaluation.filter_thresholds
    }

    report = None
    if np.any(is_test):
        train_scores = scores_for_observations(data.tile[train], hg)
        test_scores = scores_for_observations(data.tile[is_test], hg)
        report = calibration_report(train_scores, labels[train],
                                    test_scores, labels[is_test])
    return EvaluationResult(
        hotspot_grid=hg, median_y=median_y, spearman_all=rho,
        spearman_by_threshold=by_threshold, report=report,
        n_train=int(train.sum()), n_test=int(is_test.sum()),
        fitted_params=result.fitted_params,
    )


def run_evaluate(config: PipelineConfig, allow_mismatch: bool = False) -> EvaluationResult:
    """File-based evaluation stage over a simulated campaign."""
    timer = _StageTimer()
    source = config.paths.get("evaluate_input") or config.stage_output("simulated.csv")
    if not source.exists():
        raise DataError(f"evaluate input not found: {source} (run simulate first?)")
    warnings = check_upstream_hash(
        config, config.stage_output("simulate_metadata.json"), allow_mismatch)
    grid = make_grid(config.grid.bbox, config.grid.tile_size_m)
    with timer.time("load"):
        with open(config.require_path("raster_csv"), encoding="utf-8") as stream:
            raster = load_raster(stream, grid)
        with open(source, encoding="utf-8") as stream:
            data = read_sim_csv(stream)
    with timer.time("evaluate"):
        result = evaluate_simulation(data, raster, config)

    with timer.time("write"):
        metrics = {
            "median_y": result.median_y,
            "spearman": result.spearman_all,
            "spearman_by_threshold": {str(k): v for k, v in
                                      result.spearman_by_threshold.items()},
            "n_train": result.n_train,
            "n_test": result.n_test,
        }
        if result.report is not None:
            metrics.update({
                "brier_raw": result.report.brier_raw,
                "brier_calibrated": result.report.brier_calibrated,
                "ece_raw": result.report.ece_raw,
                "ece_calibrated": result.report.ece_calibrated,
                "n_test_scored": result.report.n_test,
                "n_test_unscored": result.report.n_excluded,
            })
        with open(config.stage_output("metrics.json"), "w", encoding="utf-8") as out:
            json.dump(metrics, out, sort_keys=True, indent=2)
            out.write("\n")
        if result.report is not None:
            with open(config.stage_output("calibration_bins.csv"), "w",
                      encoding="utf-8") as out:
                evaluate.write_calibration_csv(result.report, out)
        with open(config.stage_output("eval_scores.csv"), "w", encoding="utf-8") as out:
            write_hotspot_csv(result.hotspot_grid, out)
    meta = _metadata(config, "evaluate", timer, median_y=result.median_y,
                     fitted_params=result.fitted_params, warnings=warnings,
                     extra={"metrics": metrics})
    write_metadata(meta, config.stage_output("evaluate_metadata.json"))
    return result
