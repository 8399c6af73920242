"""Declarative pipeline configuration and per-stage run metadata.

One YAML file drives every subcommand.  The seed is mandatory: runs are
never seeded from the wall clock.  A canonical hash of the configuration
is embedded in each stage's metadata so that chained stages can refuse
inputs produced under a different configuration.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

import pmhotspot
from pmhotspot.ensemble import EnsembleConfig, SamplingWeights
from pmhotspot.errors import ConfigError
from pmhotspot.grid import BoundingBox
from pmhotspot.ingest import CleaningConfig, parse_timestamp
from pmhotspot.normalize import NormalizationConfig
from pmhotspot.simulate import DEFAULT_OBSERVATION_SPACING_M, SimNoiseConfig


@dataclass(frozen=True)
class GridSettings:
    bbox: BoundingBox
    tile_size_m: float = 200.0

    def __post_init__(self):
        if self.tile_size_m <= 0:
            raise ConfigError("grid.tile_size_m must be positive")


@dataclass(frozen=True)
class FitSettings:
    restarts: int = 3
    max_iter: int = 200
    norm: str = "l1"
    coord_mode: str = "local_xy"

    def __post_init__(self):
        if self.norm not in ("l1", "l2"):
            raise ConfigError("ensemble.norm must be 'l1' or 'l2'")
        if self.coord_mode not in ("local_xy", "raw_degrees"):
            raise ConfigError("coord_mode must be 'local_xy' or 'raw_degrees'")


@dataclass(frozen=True)
class SimulationSettings:
    n_route_pairs: int = 10_000
    spacing_m: float = DEFAULT_OBSERVATION_SPACING_M
    period: tuple[float, float] = (0.0, 30 * 86400.0)

    def __post_init__(self):
        if self.n_route_pairs < 1:
            raise ConfigError("simulation.n_route_pairs must be at least 1")
        if self.spacing_m <= 0:
            raise ConfigError("simulation.spacing_m must be positive")
        if not self.period[0] < self.period[1]:
            raise ConfigError("simulation.period start must precede end")


@dataclass(frozen=True)
class EvaluationSettings:
    n_test_days: int = 6
    filter_thresholds: tuple[int, ...] = ()

    def __post_init__(self):
        if self.n_test_days < 0:
            raise ConfigError("evaluation.n_test_days must be non-negative")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a run needs; paths are resolved relative to the YAML file."""

    seed: int
    output_dir: Path
    paths: dict[str, Path]
    column_map: dict[str, str]
    cleaning: CleaningConfig
    normalization: NormalizationConfig
    utc_offset_hours: float
    grid: GridSettings
    ensemble: EnsembleConfig
    fit: FitSettings
    p_crit: float
    simulation: SimulationSettings
    sim_noise: SimNoiseConfig
    evaluation: EvaluationSettings
    window_candidates: tuple[float, ...] = (1.0, 5.0, 15.0, 30.0, 60.0)
    threads: int = 1

    def require_path(self, key: str) -> Path:
        path = self.paths.get(key)
        if path is None:
            raise ConfigError(f"config is missing required path '{key}'")
        if not path.exists():
            raise ConfigError(f"configured {key} does not exist: {path}")
        return path

    def stage_output(self, name: str) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        return self.output_dir / name


def _parse_bbox(raw: dict | None, where: str) -> BoundingBox | None:
    if raw is None:
        return None
    try:
        return BoundingBox(float(raw["min_lat"]), float(raw["max_lat"]),
                           float(raw["min_lon"]), float(raw["max_lon"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid bounding box in {where}: {exc}") from exc


def _parse_period(raw, where: str) -> tuple[float, float] | None:
    if raw is None:
        return None
    try:
        start, end = raw
        return parse_timestamp(str(start)), parse_timestamp(str(end))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid time range in {where}: {exc}") from exc


def load_config(path: str | Path) -> PipelineConfig:
    """Parse and validate the YAML pipeline configuration."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    if "seed" not in raw:
        raise ConfigError("config must set an explicit seed (no wall-clock seeding)")

    base = path.parent

    def resolve(p: str) -> Path:
        candidate = Path(p)
        return candidate if candidate.is_absolute() else base / candidate

    try:
        seed = int(raw["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"seed must be an integer: {exc}") from exc

    paths = {key: resolve(str(value))
             for key, value in (raw.get("paths") or {}).items()}

    cleaning_raw = raw.get("cleaning") or {}
    grid_raw = raw.get("grid") or {}
    ensemble_raw = raw.get("ensemble") or {}
    sim_raw = raw.get("simulation") or {}
    eval_raw = raw.get("evaluation") or {}
    norm_raw = raw.get("normalization") or {}

    cleaning_bbox = _parse_bbox(cleaning_raw.get("bbox"), "cleaning.bbox")
    grid_bbox = _parse_bbox(grid_raw.get("bbox"), "grid.bbox") or cleaning_bbox
    if grid_bbox is None:
        raise ConfigError("config must set grid.bbox (or cleaning.bbox)")

    try:
        cleaning = CleaningConfig(
            bbox=cleaning_bbox,
            date_range=_parse_period(cleaning_raw.get("date_range"),
                                     "cleaning.date_range"),
            pm25_max=float(cleaning_raw.get("pm25_max", 500.0)),
            drop_zero_speed=bool(cleaning_raw.get("drop_zero_speed", True)),
        )
        normalization = NormalizationConfig(
            window_minutes=float(norm_raw.get("window_minutes", 15.0)))
        weights = SamplingWeights(
            p_high=float(ensemble_raw.get("p_high", 0.3)),
            p_low=float(ensemble_raw.get("p_low", 0.3)),
            r_high=float(ensemble_raw.get("r_high", 0.2)),
            r_low=float(ensemble_raw.get("r_low", 0.2)),
            extreme_odds=(float(ensemble_raw["extreme_odds"])
                          if "extreme_odds" in ensemble_raw else None),
        )
        ensemble = EnsembleConfig(
            n_models=int(ensemble_raw.get("n_models", 100)),
            subsample_size=int(ensemble_raw.get("subsample_size", 2000)),
            weights=weights,
            seed=seed,
            max_failure_fraction=float(ensemble_raw.get("max_failure_fraction", 0.1)),
        )
        sim_noise = SimNoiseConfig(
            spike_prob=float(sim_raw.get("spike_prob", 0.05)),
            gamma_shape=float(sim_raw.get("gamma_shape", 5.0)),
            gamma_scale=float(sim_raw.get("gamma_scale", 5.0)),
            gauss_sd=float(sim_raw.get("gauss_sd", 1.0)),
            seed=seed,
            gamma_mode=str(sim_raw.get("gamma_mode", "shape_scale")),
        )
        p_crit = float(raw.get("hotspot", {}).get("p_crit", 0.95))
        if not 0.0 < p_crit < 1.0:
            raise ConfigError("hotspot.p_crit must lie strictly inside (0, 1)")
        period = _parse_period(sim_raw.get("period"), "simulation.period") \
            or SimulationSettings().period
        config = PipelineConfig(
            seed=seed,
            output_dir=resolve(str(raw.get("output_dir", "out"))),
            paths=paths,
            column_map=dict(raw.get("column_map") or {}),
            cleaning=cleaning,
            normalization=normalization,
            utc_offset_hours=float(norm_raw.get("utc_offset_hours", 0.0)),
            grid=GridSettings(bbox=grid_bbox,
                              tile_size_m=float(grid_raw.get("tile_size_m", 200.0))),
            ensemble=ensemble,
            fit=FitSettings(
                restarts=int(ensemble_raw.get("restarts", 3)),
                max_iter=int(ensemble_raw.get("max_iter", 200)),
                norm=str(ensemble_raw.get("norm", "l1")),
                coord_mode=str(raw.get("coord_mode", "local_xy")),
            ),
            p_crit=p_crit,
            simulation=SimulationSettings(
                n_route_pairs=int(sim_raw.get("n_route_pairs", 10_000)),
                spacing_m=float(sim_raw.get("spacing_m",
                                            DEFAULT_OBSERVATION_SPACING_M)),
                period=period,
            ),
            sim_noise=sim_noise,
            evaluation=EvaluationSettings(
                n_test_days=int(eval_raw.get("n_test_days", 6)),
                filter_thresholds=tuple(int(t) for t in
                                        eval_raw.get("filter_thresholds", ())),
            ),
            window_candidates=tuple(float(w) for w in
                                    raw.get("window_candidates",
                                            (1.0, 5.0, 15.0, 30.0, 60.0))),
            threads=int(raw.get("threads", 1)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return config


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, (tuple, frozenset)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "__dataclass_fields__"):
        return _jsonable(asdict(obj))
    return obj


def config_snapshot(config: PipelineConfig) -> dict:
    """JSON-safe dump of the full configuration."""
    return _jsonable(asdict(config))


def config_hash(config: PipelineConfig) -> str:
    """Canonical digest used to detect cross-stage config mismatches.

    Operational fields that cannot change results (worker count, output
    location) are excluded so that overriding them does not invalidate
    upstream stage outputs.
    """
    snapshot = config_snapshot(config)
    snapshot.pop("threads", None)
    snapshot.pop("output_dir", None)
    canonical = json.dumps(snapshot, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


@dataclass
class RunMetadata:
    """Reproducibility record written next to every stage output.

    Timings are wall-clock and therefore the one field that varies
    between otherwise identical runs.
    """

    stage: str
    config_hash: str
    config: dict
    version: str = field(default_factory=lambda: pmhotspot.__version__)
    timings_s: dict[str, float] = field(default_factory=dict)
    fitted_params: list[dict] = field(default_factory=list)
    median_y: float | None = None
    warnings: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def write_metadata(meta: RunMetadata, path: Path) -> None:
    path.write_text(json.dumps(_jsonable(asdict(meta)), sort_keys=True, indent=2)
                    + "\n", encoding="utf-8")


def read_metadata(path: Path) -> dict:
    return json.loads(path.read_text(encoding="utf-8"))


def check_upstream_hash(config: PipelineConfig, upstream_meta_path: Path,
                        allow_mismatch: bool) -> list[str]:
    """Compare this run's config hash against an upstream stage's metadata.

    Returns warnings (possibly empty); raises ConfigError on a mismatch
    unless explicitly overridden.
    """
    if not upstream_meta_path.exists():
        return [f"no upstream metadata at {upstream_meta_path}; skipping hash check"]
    upstream = read_metadata(upstream_meta_path).get("config_hash")
    current = config_hash(config)
    if upstream == current:
        return []
    message = (f"upstream stage at {upstream_meta_path} ran with config hash "
               f"{upstream}, current is {current}")
    if allow_mismatch:
        return [message + " (override accepted)"]
    raise ConfigError(message + "; rerun upstream or pass --allow-config-mismatch")
