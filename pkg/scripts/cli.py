#!/usr/bin/env python3
"""
agwork: command line for the agricultural workforce pipeline.

Usage:
    agwork [--config PATH] [--threads N] [--seed N] [--out DIR] <command>

Commands:
    features   per-unit covariates for every label year -> features.csv
    fit        Beta GAMM fit -> model.arrow, metrics.csv, diagnostics tables
    validate   spatial / temporal / multiscale validation reports
    deploy     SSP grid deployment, worker counts, optional correction
    config     print effective settings (or --print-defaults)

Exit codes: 0 success, 2 invalid input or config, 3 missing/unreadable files,
1 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from importlib import metadata
from pathlib import Path
from typing import Callable, Optional, Sequence

import pandas as pd
import structlog
import yaml

if __package__:
    from .basis import LINEAR, UNIVARIATE
    from .config import RunConfig, check_paths, configure_threads, defaults_yaml, env_threads, load_config
    from .deploy import (
        SCENARIOS, StackInputs, country_changes, deploy_all, deployment_frame,
        read_unit_year_values, regional_summary,
    )
    from .export import build_manifest, frame_table, write_manifest, write_table
    from .gamm import (
        STRUCTURES, FitMetrics, FittedModel, ModelData, export_partial_effects, fit, metrics,
        residual_diagnostics, structure_comparison,
    )
    from .grid_io import read_raster, read_zone_map
    from .ingest import build_feature_table, read_features, read_labels, write_features
    from .logs import configure_logging
    from .model_store import load_model, save_model
    from .raster import CROPLAND, GDP_PC, PASTURE, RURAL, TOTAL, cell_area_km2
    from .validate import build_plans, check_plan, country_frame, evaluate_all, report_frame
else:
    from basis import LINEAR, UNIVARIATE
    from config import RunConfig, check_paths, configure_threads, defaults_yaml, env_threads, load_config
    from deploy import (
        SCENARIOS, StackInputs, country_changes, deploy_all, deployment_frame,
        read_unit_year_values, regional_summary,
    )
    from export import build_manifest, frame_table, write_manifest, write_table
    from gamm import (
        STRUCTURES, FitMetrics, FittedModel, ModelData, export_partial_effects, fit, metrics,
        residual_diagnostics, structure_comparison,
    )
    from grid_io import read_raster, read_zone_map
    from ingest import build_feature_table, read_features, read_labels, write_features
    from logs import configure_logging
    from model_store import load_model, save_model
    from raster import CROPLAND, GDP_PC, PASTURE, RURAL, TOTAL, cell_area_km2
    from validate import build_plans, check_plan, country_frame, evaluate_all, report_frame

log = structlog.get_logger(__name__)

try:
    __version__ = metadata.version("agworkforce")
except metadata.PackageNotFoundError:
    __version__ = "0+unknown"

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_INVALID = 2
EXIT_IO = 3

METRICS_COLUMNS = [
    "structure", "n", "edf", "phi", "gcv", "aic", "explained_variance", "r2", "rmse", "converged",
]


def _require(paths: dict[str, Path]) -> None:
    """Fail before any work if an input path is missing."""
    findings = check_paths(paths)
    if findings:
        raise FileNotFoundError("missing inputs: " + "; ".join(f.message for f in findings))


# =============================================================================
# features
# =============================================================================

def cmd_features(cfg: RunConfig) -> list[Path]:
    f = cfg.section("features")
    anchors = sorted(int(y) for y in f["anchor_years"])
    labels_path = cfg.resolve(cfg["labels"])

    paths = {
        "zones.grid": cfg.resolve(f["zones"]["grid"]),
        "zones.legend": cfg.resolve(f["zones"]["legend"]),
        "cropland": cfg.resolve(f["cropland"]),
        "pasture": cfg.resolve(f["pasture"]),
    }
    if f["years"] is None:
        paths["labels"] = labels_path
    for year in anchors:
        paths[f"rural[{year}]"] = cfg.layer_path(f["rural"], year)
        paths[f"total[{year}]"] = cfg.layer_path(f["total"], year)
    _require(paths)

    if f["years"] is None:
        years = sorted({r.year for r in read_labels(labels_path).records})
    else:
        years = sorted(int(y) for y in f["years"])
    gdp_paths = {year: cfg.layer_path(f["gdp_pc"], year) for year in years}
    _require({f"gdp_pc[{y}]": p for y, p in gdp_paths.items()})

    zones = read_zone_map(paths["zones.grid"], paths["zones.legend"])
    rural = {y: read_raster(paths[f"rural[{y}]"], RURAL, y) for y in anchors}
    total = {y: read_raster(paths[f"total[{y}]"], TOTAL, y) for y in anchors}
    gdp = {y: read_raster(p, GDP_PC, y) for y, p in gdp_paths.items()}
    cropland = read_raster(paths["cropland"], CROPLAND)
    pasture = read_raster(paths["pasture"], PASTURE)

    features = build_feature_table(
        rural, total, gdp, cropland, pasture, zones, cell_area_km2(zones.spec), years, f["agland_mode"]
    )
    out = write_features(features, cfg.out_dir / "features.csv", f["agland_mode"])

    counts = pd.Series([r.year for r in features], dtype="int64").value_counts().sort_index()
    print(frame_table(pd.DataFrame({"year": counts.index, "units": counts.values})))
    return [out]


# =============================================================================
# fit
# =============================================================================

def _metrics_row(structure: str, model: FittedModel, m: FitMetrics) -> list:
    d = model.diagnostics
    return [structure, d.n, d.edf, model.phi, m.gcv, m.aic, m.explained_variance, m.r2, m.rmse, int(d.converged)]


def _effect_variables(model: FittedModel, configured: Optional[Sequence[str]]) -> list[str]:
    if configured:
        return list(configured)
    return [b.spec.variables[0] for b in model.blocks if b.spec.kind in (UNIVARIATE, LINEAR)]


def cmd_fit(cfg: RunConfig) -> list[Path]:
    m = cfg.section("model")
    labels_path = cfg.resolve(cfg["labels"])
    _require({"labels": labels_path, "features": cfg.features_path})

    labels = read_labels(labels_path)
    features = read_features(cfg.features_path)
    data = ModelData.from_labels(labels.records, features)
    fit_config = cfg.fit_config()

    if m["compare_structures"]:
        spec = cfg.model_spec()
        results = structure_comparison(
            labels, features, STRUCTURES, fit_config, spec.grouping,
            cfg.section("features")["agland_mode"], int(m["univariate_rank"]),
            (int(m["tensor_rank"][0]), int(m["tensor_rank"][1])),
        )
        rows = [_metrics_row(s, model, met) for s, model, met in results]
        model = next(model for s, model, _ in results if s == m["structure"])
    else:
        model = fit(cfg.model_spec(), labels, features, fit_config)
        rows = [_metrics_row(m["structure"], model, metrics(model, data))]

    out = cfg.out_dir
    outputs = [save_model(model, out / "model.arrow")]
    table = pd.DataFrame(rows, columns=METRICS_COLUMNS)
    outputs.append(write_table(table, out / "metrics.csv"))

    for variable in _effect_variables(model, m["partial_effects"]):
        outputs.append(write_table(export_partial_effects(model, variable), out / f"partial_effects_{variable}.csv"))

    fitted, histogram = residual_diagnostics(model, data, int(m["histogram_bins"]))
    outputs.append(write_table(fitted, out / "fitted_vs_observed.csv"))
    outputs.append(write_table(histogram, out / "residual_histogram.csv"))

    print(frame_table(table))
    return outputs


# =============================================================================
# validate
# =============================================================================

def cmd_validate(cfg: RunConfig) -> list[Path]:
    v = cfg.section("validation")
    labels_path = cfg.resolve(cfg["labels"])
    _require({"labels": labels_path, "features": cfg.features_path})

    labels = read_labels(labels_path)
    features = read_features(cfg.features_path)
    seeds = [cfg.seed] if "seed" in cfg.overrides else [int(s) for s in v["seeds"]]
    plans = build_plans(labels, v["strategies"], seeds, v["regions"])
    for plan in plans:
        for finding in check_plan(plan, labels):
            if finding.level != "ERROR":
                log.warning("split_finding", plan=plan.label, code=finding.code, message=finding.message)

    # plans already run in parallel; keep each fit single-threaded
    fit_config = replace(cfg.fit_config(), threads=1)
    reports = evaluate_all(cfg.model_spec(), plans, labels, features, fit_config, cfg.threads)

    report = report_frame(reports)
    outputs = [
        write_table(report, cfg.out_dir / "validation_report.csv"),
        write_table(country_frame(reports), cfg.out_dir / "validation_countries.csv"),
    ]
    print(frame_table(report))
    return outputs


# =============================================================================
# deploy
# =============================================================================

def cmd_deploy(cfg: RunConfig) -> list[Path]:
    d = cfg.section("deploy")
    scenarios = [str(s).upper() for s in d["scenarios"]]
    unknown = [s for s in scenarios if s not in SCENARIOS]
    if unknown:
        raise ValueError(f"unknown scenarios {unknown}. Supported: {', '.join(SCENARIOS)}")
    years = sorted(int(y) for y in d["years"])

    paths = {
        "model": cfg.model_path,
        "cropland": cfg.resolve(d["cropland"]),
        "pasture": cfg.resolve(d["pasture"]),
        "admin2.grid": cfg.resolve(d["admin2"]["grid"]),
        "admin2.legend": cfg.resolve(d["admin2"]["legend"]),
    }
    for key in ("mask", "employable", "reference"):
        if d[key]:
            paths[key] = cfg.resolve(d[key])
    for scenario in scenarios:
        for year in years:
            for layer in (RURAL, TOTAL, GDP_PC):
                paths[f"{layer}[{scenario}/{year}]"] = cfg.layer_path(d[layer], year, scenario)
    _require(paths)

    model = load_model(paths["model"])
    cropland = read_raster(paths["cropland"], CROPLAND)
    pasture = read_raster(paths["pasture"], PASTURE)
    admin = read_zone_map(paths["admin2.grid"], paths["admin2.legend"])
    mask = read_raster(paths["mask"], "mask") if "mask" in paths else None
    employable = read_unit_year_values(paths["employable"], "ratio") if "employable" in paths else None
    reference = read_unit_year_values(paths["reference"], "epwa") if "reference" in paths else None

    def load_inputs(scenario: str, year: int) -> StackInputs:
        def layer(name: str):
            return read_raster(paths[f"{name}[{scenario}/{year}]"], name, year, scenario)

        return StackInputs(
            rural=layer(RURAL), total=layer(TOTAL), gdp_pc=layer(GDP_PC),
            cropland=cropland, pasture=pasture, admin2=admin, mask=mask,
        )

    out = cfg.out_dir
    results = deploy_all(
        model, scenarios, years, load_inputs, out,
        threads=cfg.threads,
        grid=cfg.deploy_grid(),
        employable=employable,
        reference=reference,
        carry=bool(d["carry_forward"]),
        formats=tuple(d["formats"]),
    )

    outputs: list[Path] = []
    baseline = int(d["baseline_year"])
    for res in results:
        ssp = res.scenario.lower()
        for record in res.records:
            outputs.extend(record.outputs)
        if reference is not None:
            outputs.append(write_table(res.corrections.frame(), out / f"correction_{ssp}.csv"))
        if all(y in res.workers for y in (baseline, 2050, 2100)):
            outputs.append(write_table(
                regional_summary(res.workers, res.admin, baseline), out / f"regional_summary_{ssp}.csv"
            ))
            outputs.append(write_table(
                country_changes(res.workers, res.admin, baseline, 2100, int(d["top_n"])),
                out / f"country_changes_{ssp}.csv",
            ))
        else:
            log.warning("summary_skipped", scenario=res.scenario, reason="baseline or horizon year not deployed")

    report = deployment_frame(results)
    outputs.append(write_table(report, out / "deployment_report.csv"))
    print(frame_table(report))
    return outputs


# =============================================================================
# config
# =============================================================================

def cmd_config(cfg: RunConfig, print_defaults: bool) -> None:
    if print_defaults:
        sys.stdout.write(defaults_yaml())
    else:
        sys.stdout.write(yaml.safe_dump(cfg.canonical(), sort_keys=False, default_flow_style=False))


COMMANDS: dict[str, Callable[[RunConfig], list[Path]]] = {
    "features": cmd_features,
    "fit": cmd_fit,
    "validate": cmd_validate,
    "deploy": cmd_deploy,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agwork",
        description="Agricultural workforce (EPWA) downscaling pipeline",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  agwork --config run.yaml features        Build features.csv from rasters
  agwork --config run.yaml fit             Fit the Beta GAMM
  agwork --config run.yaml --seed 3 validate
  agwork --config run.yaml --threads 4 deploy
  agwork config --print-defaults           Dump built-in defaults as YAML
        """,
    )
    parser.add_argument("--config", help="Run config YAML (default: $AGWORK_CONFIG)")
    parser.add_argument("--threads", type=int, help="Worker cap (default: $AGWORK_THREADS or config)")
    parser.add_argument("--seed", type=int, help="Override the config seed")
    parser.add_argument("--out", help="Output directory (overrides config out_dir)")
    parser.add_argument("--log-level", help="Log level (default: $AGWORK_LOG_LEVEL or INFO)")
    parser.add_argument("--log-format", choices=["json", "console"], help="Log renderer")

    subparsers = parser.add_subparsers(dest="command", help="Commands")
    subparsers.add_parser("features", help="Compute per-unit covariates")
    subparsers.add_parser("fit", help="Fit the Beta GAMM")
    subparsers.add_parser("validate", help="Run validation strategies")
    subparsers.add_parser("deploy", help="Deploy the model on SSP grids")
    config_parser = subparsers.add_parser("config", help="Show configuration")
    config_parser.add_argument("--print-defaults", action="store_true", help="Print built-in defaults")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return EXIT_INVALID

    configure_logging(args.log_level, args.log_format)
    try:
        if args.command == "config" and args.print_defaults:
            cmd_config(load_config(None), True)
            return EXIT_OK

        overrides = {
            "seed": args.seed,
            "threads": args.threads if args.threads is not None else env_threads(),
            "out_dir": args.out,
        }
        cfg = load_config(args.config, overrides)
        configure_threads(cfg.threads)

        if args.command == "config":
            cmd_config(cfg, False)
            return EXIT_OK

        log.info("command_started", command=args.command, seed=cfg.seed, threads=cfg.threads)
        outputs = COMMANDS[args.command](cfg)
        manifest = build_manifest(args.command, __version__, cfg.sha256(), cfg.seed, outputs, cfg.out_dir)
        path = write_manifest(manifest, cfg.out_dir)
        log.info("command_finished", command=args.command, outputs=len(outputs), manifest=str(path))
        return EXIT_OK
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
