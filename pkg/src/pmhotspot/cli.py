"""Command-line entry point.

Subcommands mirror the pipeline stages and hand data between stages as
CSV files in the configured output directory:

    pmhotspot ingest --config run.yaml
    pmhotspot normalize --config run.yaml
    pmhotspot fit-score --config run.yaml
    pmhotspot simulate --config run.yaml
    pmhotspot evaluate --config run.yaml
    pmhotspot window-sweep --config run.yaml

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from pmhotspot import __version__, pipeline
from pmhotspot.config import PipelineConfig, load_config
from pmhotspot.errors import ConfigError, DataError, NumericalError

logger = logging.getLogger("pmhotspot")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pmhotspot",
        description="Urban PM2.5 hotspot detection from mobile-sensor data",
    )
    parser.add_argument("--version", action="version", version=f"pmhotspot {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, description in (
        ("ingest", "parse and clean raw sensor CSVs"),
        ("normalize", "subtract the rolling-median baseline"),
        ("fit-score", "fit the bagged GP ensemble and score the grid"),
        ("simulate", "generate a synthetic mobile-sensing campaign"),
        ("evaluate", "evaluate scores against simulated ground truth"),
        ("window-sweep", "compare candidate baseline window lengths"),
    ):
        cmd = sub.add_parser(name, help=description)
        cmd.add_argument("--config", required=True, help="pipeline YAML config")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the config seed")
        cmd.add_argument("--threads", type=int, default=None,
                         help="worker cap for parallel stages")
        cmd.add_argument("--output-dir", default=None,
                         help="override the config output directory")
        cmd.add_argument("--allow-config-mismatch", action="store_true",
                         help="accept upstream files from a different config")
        cmd.add_argument("-v", "--verbose", action="store_true")
    return parser


def _apply_overrides(config: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    replacements = {}
    if args.output_dir is not None:
        replacements["output_dir"] = Path(args.output_dir)
    if args.threads is not None:
        replacements["threads"] = args.threads
    if args.seed is not None:
        replacements["seed"] = args.seed
        replacements["ensemble"] = dataclasses.replace(config.ensemble, seed=args.seed)
        replacements["sim_noise"] = dataclasses.replace(config.sim_noise, seed=args.seed)
    return dataclasses.replace(config, **replacements) if replacements else config


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = _apply_overrides(load_config(args.config), args)
        if args.command == "ingest":
            outcome = pipeline.run_ingest(config)
            print(f"retained {outcome['retained']} records "
                  f"({outcome['diagnostics']} parse diagnostics) "
                  f"-> {config.stage_output('cleaned.csv')}")
            if outcome["retained"] == 0:
                logger.warning("no records survived cleaning")
        elif args.command == "normalize":
            outcome = pipeline.run_normalize(config, args.allow_config_mismatch)
            median = outcome["median_y"]
            print(f"normalized {outcome['n']} records, median_y="
                  f"{'n/a' if median is None else format(median, '.6g')} "
                  f"-> {config.stage_output('normalized.csv')}")
        elif args.command == "fit-score":
            result = pipeline.run_fit_score(config, args.allow_config_mismatch)
            scored = int(result.hotspot_grid.scored_mask().sum())
            print(f"scored {scored}/{result.hotspot_grid.grid.n_tiles} tiles "
                  f"-> {config.stage_output('scores.csv')}")
        elif args.command == "simulate":
            data = pipeline.run_simulate(config)
            print(f"simulated {len(data)} observations "
                  f"-> {config.stage_output('simulated.csv')}")
        elif args.command == "evaluate":
            result = pipeline.run_evaluate(config, args.allow_config_mismatch)
            rho = result.spearman_all
            print(f"spearman={'n/a' if rho is None else format(rho, '.4f')}"
                  + (f" ece={result.report.ece_raw:.4f}"
                     f"->{result.report.ece_calibrated:.4f}"
                     if result.report else "")
                  + f" -> {config.stage_output('metrics.json')}")
        elif args.command == "window-sweep":
            scores = pipeline.run_window_sweep(config)
            best = min(scores, key=scores.get)
            for window, score in scores.items():
                marker = " *" if window == best else ""
                print(f"x_w={window:g} min: smoothness={score:.6g}{marker}")
        else:  # pragma: no cover - argparse enforces the choices
            raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        logger.error("%s", exc)
        return 2
    except (DataError, ValueError) as exc:
        logger.error("%s", exc)
        return 3
    except NumericalError as exc:
        logger.error("%s", exc)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
