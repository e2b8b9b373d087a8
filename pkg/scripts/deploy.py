#!/usr/bin/env python3
"""
Grid-cell deployment, agricultural worker counts and aggregate-preserving correction.

For each (scenario, year):
1. resample inputs to the deploy grid and floor sub-unit populations
2. broadcast admin-2 median GDP per capita to every cell of the unit
3. predict EPWA per cell (country effect, else regional model, else none)
4. workers = EPWA * N * R with R constant within a unit
5. optionally scale each unit by xi so population-weighted means match a reference
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
import structlog

if __package__:
    from .gamm import FittedModel, predict_arrays
    from .grid_io import write_raster
    from .ingest import EPS_Y, log_floor_positive, log_floor_ratio, region_label
    from .raster import (
        CROPLAND, DEPLOY_GRID, EPWA, GDP_PC, PASTURE, RURAL, TOTAL, WORKERS,
        GridSpec, Raster, ZoneMap, ZoneUnit, broadcast_zonal, cell_area_km2, check_aligned,
        floor_subunit_population, mask_mismatch_mass, resample, resample_zones, zonal_stat,
    )
else:
    from gamm import FittedModel, predict_arrays
    from grid_io import write_raster
    from ingest import EPS_Y, log_floor_positive, log_floor_ratio, region_label
    from raster import (
        CROPLAND, DEPLOY_GRID, EPWA, GDP_PC, PASTURE, RURAL, TOTAL, WORKERS,
        GridSpec, Raster, ZoneMap, ZoneUnit, broadcast_zonal, cell_area_km2, check_aligned,
        floor_subunit_population, mask_mismatch_mass, resample, resample_zones, zonal_stat,
    )

log = structlog.get_logger(__name__)

PathLike = Union[str, Path]

SCENARIOS = ("SSP1", "SSP2", "SSP3", "SSP4", "SSP5")
DEPLOY_YEARS = tuple(range(2000, 2101, 10))
PREDICT_CHUNK = 262_144

LAYER_METHODS = {
    RURAL: "block_sum",
    TOTAL: "block_sum",
    GDP_PC: "block_mean",
    CROPLAND: "block_mean",
    PASTURE: "block_mean",
}

CORRECTION_COLUMNS = ["unit_id", "year", "xi", "clamped_cells"]
SUMMARY_COLUMNS = ["region", "pop_baseline", "pop_2050", "delta_2050", "pop_2100", "delta_2100"]


class ManifestError(ValueError):
    """Raised when a deployment input layer is missing or unusable."""


# =============================================================================
# Stack
# =============================================================================

@dataclass(frozen=True, eq=False)
class StackInputs:
    """Raw layers for one deployment, on any grid resampleable to the deploy grid."""

    rural: Optional[Raster]
    total: Optional[Raster]
    gdp_pc: Optional[Raster]
    cropland: Optional[Raster]
    pasture: Optional[Raster]
    admin2: Optional[ZoneMap]
    mask: Optional[Raster] = None
    methods: Mapping[str, str] = field(default_factory=lambda: dict(LAYER_METHODS))


@dataclass(frozen=True, eq=False)
class DeployStack:
    year: int
    scenario: str
    grid: GridSpec
    rural: Raster
    total: Raster
    cropland: Raster
    pasture: Raster
    gdp: Raster
    admin2: ZoneMap
    cell_area: Raster
    countries: np.ndarray
    regions: np.ndarray
    mask: Optional[Raster] = None
    mask_loss: float = 0.0
    employable: Mapping[str, float] = field(default_factory=dict)


def _cell_lineage(zones: ZoneMap) -> tuple[np.ndarray, np.ndarray]:
    countries = np.full(zones.spec.size, "", dtype=object)
    regions = np.full(zones.spec.size, "", dtype=object)
    units = zones.units()
    positions, dense = zones.dense_index()
    if units:
        countries[positions] = np.array([u.country_iso3 for u in units], dtype=object)[dense]
        regions[positions] = np.array([u.region_code for u in units], dtype=object)[dense]
    return countries.reshape(zones.spec.shape), regions.reshape(zones.spec.shape)


def build_stack(
    inputs: StackInputs,
    year: int,
    scenario: str,
    grid: GridSpec = DEPLOY_GRID,
    employable: Optional[Mapping[str, float]] = None,
) -> DeployStack:
    layers = {
        RURAL: inputs.rural, TOTAL: inputs.total, GDP_PC: inputs.gdp_pc,
        CROPLAND: inputs.cropland, PASTURE: inputs.pasture,
    }
    missing = sorted(name for name, layer in layers.items() if layer is None)
    if inputs.admin2 is None:
        missing.append("admin2")
    if missing:
        raise ManifestError(f"deployment {scenario}/{year} missing layers: {missing}")

    res = {
        name: resample(layer, grid, inputs.methods.get(name, LAYER_METHODS[name]))
        for name, layer in layers.items()
    }
    zones = resample_zones(inputs.admin2, grid)
    rural = floor_subunit_population(res[RURAL])
    total = floor_subunit_population(res[TOTAL])

    gdp_median = zonal_stat(res[GDP_PC], zones, "median")
    gdp = broadcast_zonal(gdp_median, zones, GDP_PC, year, scenario)

    mask = resample(inputs.mask, grid, "nearest") if inputs.mask is not None else None
    mask_loss = mask_mismatch_mass(total, mask) if mask is not None else 0.0

    ratios = dict(employable or {})
    bad = sorted(u for u, r in ratios.items() if not (math.isfinite(r) and 0.0 <= r <= 1.0))
    if bad:
        raise ManifestError(f"employable ratios outside [0, 1] for units {bad[:10]}")

    countries, regions = _cell_lineage(zones)
    stack = DeployStack(
        year=year,
        scenario=scenario,
        grid=grid,
        rural=replace(rural, year=year, scenario=scenario),
        total=replace(total, year=year, scenario=scenario),
        cropland=res[CROPLAND],
        pasture=res[PASTURE],
        gdp=gdp,
        admin2=zones,
        cell_area=cell_area_km2(grid),
        countries=countries,
        regions=regions,
        mask=mask,
        mask_loss=mask_loss,
        employable=ratios,
    )
    log.info("stack_built", scenario=scenario, year=year, mask_loss=mask_loss)
    return stack


# =============================================================================
# Prediction
# =============================================================================

@dataclass(frozen=True, eq=False)
class GridResult:
    epwa: Raster
    fallback_counts: dict[str, int]


def predict_mask(stack: DeployStack) -> np.ndarray:
    """Cells that receive a prediction: positive population with every input present."""
    ok = (
        stack.total.valid_mask() & (stack.total.values > 0.0)
        & stack.rural.valid_mask() & stack.gdp.valid_mask()
        & stack.cropland.valid_mask() & stack.pasture.valid_mask()
        & (stack.admin2.zone_ids != stack.admin2.nodata)
    )
    if stack.mask is not None:
        ok &= stack.mask.valid_mask()
    return ok


def cell_features(stack: DeployStack, cells: np.ndarray) -> dict[str, np.ndarray]:
    """Log-scale features for flat cell indices, floored as for unit features."""
    total = stack.total.values.ravel()[cells]
    rural = stack.rural.values.ravel()[cells]
    crop = stack.cropland.values.ravel()[cells]
    pasture = stack.pasture.values.ravel()[cells]
    return {
        "ln_rural_prop": log_floor_ratio(np.minimum(rural / total, 1.0)),
        "ln_pop_density": log_floor_positive(total / stack.cell_area.values.ravel()[cells]),
        "ln_gdp_median": log_floor_positive(stack.gdp.values.ravel()[cells]),
        "ln_agland": log_floor_ratio(np.minimum(crop + pasture, 1.0)),
        "ln_cropland": log_floor_ratio(crop),
        "ln_pasture": log_floor_ratio(pasture),
    }


def predict_grid(model: FittedModel, stack: DeployStack, chunk: int = PREDICT_CHUNK) -> GridResult:
    cells = np.flatnonzero(predict_mask(stack))
    out = np.full(stack.grid.size, stack.grid.nodata, dtype=np.float64)
    countries = stack.countries.ravel()
    regions = stack.regions.ravel()
    counts: dict[str, int] = {}

    for start in range(0, cells.size, chunk):
        part = cells[start:start + chunk]
        columns = cell_features(stack, part)
        columns["country"] = countries[part]
        columns["region"] = regions[part]
        pred = predict_arrays(model, columns, countries[part], regions[part])
        out[part] = pred.mu
        for path, n in pred.path_counts().items():
            counts[path] = counts.get(path, 0) + n

    epwa = Raster(stack.grid, out.reshape(stack.grid.shape), EPWA, stack.year, stack.scenario)
    log.info("grid_predicted", scenario=stack.scenario, year=stack.year, cells=int(cells.size), **counts)
    return GridResult(epwa, dict(sorted(counts.items())))


# =============================================================================
# Zones by country / region
# =============================================================================

def group_zones(admin: ZoneMap, by: str = "country") -> ZoneMap:
    """Collapse an admin zone map to one zone per country (or per region)."""
    if by not in ("country", "region"):
        raise ValueError(f"cannot group zones by '{by}'")
    units = admin.units()
    keys = [u.country_iso3 if by == "country" else region_label(u.region_code) for u in units]
    groups = sorted(set(keys))
    group_id = {g: i for i, g in enumerate(groups)}
    legend: dict[int, ZoneUnit] = {}
    for u, k in zip(units, keys):
        if group_id[k] not in legend:
            legend[group_id[k]] = ZoneUnit(k, u.country_iso3 if by == "country" else "", region_label(u.region_code))

    lookup = np.array([group_id[k] for k in keys], dtype=np.int64)
    ids = np.full(admin.spec.size, admin.nodata, dtype=np.int64)
    positions, dense = admin.dense_index()
    if units:
        ids[positions] = lookup[dense]
    return ZoneMap(admin.spec, ids.reshape(admin.spec.shape), legend, admin.nodata)


# =============================================================================
# Workers
# =============================================================================

def workers_raster(
    epwa: Raster,
    population: Raster,
    employable: Mapping[str, float],
    zones: ZoneMap,
) -> tuple[Raster, list[str]]:
    """A = EPWA * N * R per cell; returns (raster, units missing from the R table)."""
    check_aligned(epwa.spec, population.spec, "EPWA and population rasters")
    check_aligned(epwa.spec, zones.spec, "EPWA raster and zone map")

    known = {u.unit_id for u in zones.units()}
    ratio = broadcast_zonal({u: r for u, r in employable.items() if u in known}, zones, "employable")

    n = population.values
    zoned = zones.zone_ids != zones.nodata
    has_n = population.valid_mask() & zoned
    has_r = ratio.valid_mask()
    out = np.full(epwa.spec.shape, epwa.spec.nodata, dtype=np.float64)

    compute = has_n & has_r & epwa.valid_mask() & (n > 0.0)
    out[compute] = epwa.values[compute] * n[compute] * ratio.values[compute]
    out[has_n & (n == 0.0)] = 0.0

    present = set(zonal_stat(population, zones, "sum"))
    missing = sorted(u for u in present if u not in employable)
    if missing:
        log.warning("employable_missing", units=missing[:20], count=len(missing))
    return Raster(epwa.spec, out, WORKERS, epwa.year, epwa.scenario), missing


# =============================================================================
# Correction
# =============================================================================

@dataclass(frozen=True)
class CorrectionEntry:
    unit_id: str
    year: int
    xi: float
    clamped_cells: int = 0


@dataclass(frozen=True)
class CorrectionTable:
    entries: tuple[CorrectionEntry, ...]
    omitted: tuple[tuple[str, int, str], ...] = ()

    def lookup(self, year: int) -> dict[str, float]:
        return {e.unit_id: e.xi for e in self.entries if e.year == year}

    def years(self) -> list[int]:
        return sorted({e.year for e in self.entries})

    def frame(self) -> pd.DataFrame:
        rows = [[e.unit_id, e.year, e.xi, e.clamped_cells] for e in self.entries]
        return pd.DataFrame(rows, columns=CORRECTION_COLUMNS)


def correction_factors(
    expected: Mapping[tuple[str, int], float],
    predicted: Raster,
    population: Raster,
    zones: ZoneMap,
    year: int,
) -> CorrectionTable:
    """xi = sum(expected * N) / sum(predicted * N) over each unit's predicted cells."""
    check_aligned(predicted.spec, population.spec, "predicted EPWA and population rasters")
    check_aligned(predicted.spec, zones.spec, "predicted EPWA raster and zone map")

    units = zones.units()
    positions, dense = zones.dense_index()
    pred = predicted.values.ravel()[positions]
    pop = population.values.ravel()[positions]
    ok = (predicted.valid_mask() & population.valid_mask()).ravel()[positions]
    pred, pop, dense = pred[ok], pop[ok], dense[ok]

    pop_sum = np.bincount(dense, weights=pop, minlength=len(units))
    weighted = np.bincount(dense, weights=pred * pop, minlength=len(units))

    entries: list[CorrectionEntry] = []
    omitted: list[tuple[str, int, str]] = []
    for k, unit in enumerate(units):
        ref = expected.get((unit.unit_id, year))
        if ref is None:
            continue
        denominator = float(weighted[k])
        if denominator <= 0.0:
            omitted.append((unit.unit_id, year, "zero_denominator"))
            continue
        xi = float(ref * pop_sum[k]) / denominator
        if not (math.isfinite(xi) and xi > 0.0):
            omitted.append((unit.unit_id, year, "non_positive_xi"))
            continue
        entries.append(CorrectionEntry(unit.unit_id, year, xi))

    for uid, yr, reason in omitted:
        log.warning("correction_omitted", unit_id=uid, year=yr, reason=reason)
    return CorrectionTable(tuple(entries), tuple(omitted))


@dataclass(frozen=True, eq=False)
class CorrectionResult:
    raster: Raster
    table: CorrectionTable
    uncorrected_units: tuple[str, ...]

    @property
    def clamped_cells(self) -> int:
        return sum(e.clamped_cells for e in self.table.entries)


def apply_correction(predicted: Raster, table: CorrectionTable, zones: ZoneMap) -> CorrectionResult:
    """corrected = min(xi * predicted, 1 - eps) per unit; units without xi pass through."""
    check_aligned(predicted.spec, zones.spec, "predicted EPWA raster and zone map")
    factors = table.lookup(predicted.year)
    units = zones.units()
    xi = np.array([factors.get(u.unit_id, np.nan) for u in units], dtype=np.float64)

    values = np.array(predicted.values, dtype=np.float64).ravel()
    positions, dense = zones.dense_index()
    cell_xi = xi[dense] if units else np.empty(0)
    valid = ~np.isnan(cell_xi) & predicted.valid_mask().ravel()[positions]
    target = positions[valid]

    scaled = cell_xi[valid] * values[target]
    ceiling = 1.0 - EPS_Y
    clamped = scaled > ceiling
    values[target] = np.minimum(scaled, ceiling)
    clamp_counts = np.bincount(dense[valid][clamped], minlength=len(units))

    index = {u.unit_id: i for i, u in enumerate(units)}
    entries = tuple(
        replace(e, clamped_cells=int(clamp_counts[index[e.unit_id]]))
        if e.year == predicted.year and e.unit_id in index else e
        for e in table.entries
    )
    present = set(zonal_stat(predicted, zones, "sum"))
    uncorrected = tuple(sorted(u for u in present if u not in factors))
    if int(clamp_counts.sum()):
        log.warning("correction_clamped", year=predicted.year, cells=int(clamp_counts.sum()))
    corrected = Raster(predicted.spec, values.reshape(predicted.spec.shape), EPWA, predicted.year, predicted.scenario)
    return CorrectionResult(corrected, CorrectionTable(entries, table.omitted), uncorrected)


def read_unit_year_values(path: PathLike, column: str) -> dict[tuple[str, int], float]:
    """Read a (unit_id, year, <column>) CSV, e.g. employable ratios or reference EPWA."""
    df = pd.read_csv(path, dtype={"unit_id": str}, keep_default_na=False,
                     float_precision="round_trip", encoding="utf-8")
    missing = [c for c in ("unit_id", "year", column) if c not in df.columns]
    if missing:
        raise ManifestError(f"{path}: missing columns {missing}")
    out: dict[tuple[str, int], float] = {}
    for uid, year, value in zip(df["unit_id"], df["year"], df[column]):
        key = (str(uid), int(year))
        if key in out:
            raise ManifestError(f"{path}: duplicate row for {key[0]}/{key[1]}")
        out[key] = float(value)
    return out


def carry_forward(table: CorrectionTable, from_year: int, to_year: int) -> CorrectionTable:
    """Reuse ``from_year`` factors for ``to_year`` (explicit opt-in for years without reference data)."""
    carried = tuple(CorrectionEntry(e.unit_id, to_year, e.xi) for e in table.entries if e.year == from_year)
    return CorrectionTable(carried)


# =============================================================================
# Summaries
# =============================================================================

def _unit_totals(workers: Raster, zones: ZoneMap) -> dict[str, float]:
    return zonal_stat(workers, zones, "sum")


def _delta(new: float, base: float) -> float:
    return 100.0 * (new - base) / base if base > 0 else math.nan


def regional_summary(
    workers_by_year: Mapping[int, Raster],
    admin: ZoneMap,
    baseline_year: int = 2020,
    years: tuple[int, int] = (2050, 2100),
) -> pd.DataFrame:
    """Worker totals per region at the baseline and two horizon years, deltas in percent."""
    zones = group_zones(admin, "region")
    base = _unit_totals(workers_by_year[baseline_year], zones)
    first = _unit_totals(workers_by_year[years[0]], zones)
    second = _unit_totals(workers_by_year[years[1]], zones)
    rows = []
    for region in sorted(set(base) | set(first) | set(second)):
        b, p1, p2 = base.get(region, 0.0), first.get(region, 0.0), second.get(region, 0.0)
        rows.append([region, b, p1, _delta(p1, b), p2, _delta(p2, b)])
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def country_changes(
    workers_by_year: Mapping[int, Raster],
    admin: ZoneMap,
    baseline_year: int = 2020,
    target_year: int = 2100,
    top_n: int = 10,
) -> pd.DataFrame:
    """Largest absolute increases and decreases in workers by country."""
    zones = group_zones(admin, "country")
    base = _unit_totals(workers_by_year[baseline_year], zones)
    target = _unit_totals(workers_by_year[target_year], zones)
    rows = []
    for country in sorted(set(base) | set(target)):
        b, t = base.get(country, 0.0), target.get(country, 0.0)
        rows.append((country, b, t, t - b))
    increases = sorted((r for r in rows if r[3] > 0), key=lambda r: (-r[3], r[0]))[:top_n]
    decreases = sorted((r for r in rows if r[3] < 0), key=lambda r: (r[3], r[0]))[:top_n]
    out = [["increase", *r] for r in increases] + [["decrease", *r] for r in decreases]
    return pd.DataFrame(out, columns=["direction", "country_iso3", "pop_baseline", "pop_target", "change"])


# =============================================================================
# Decade loop
# =============================================================================

def output_name(kind: str, scenario: str, year: int, corrected: bool, ext: str) -> str:
    return f"{kind}_{scenario.lower()}_{year}_{'corrected' if corrected else 'uncorrected'}.{ext}"


@dataclass(frozen=True)
class DeploymentRecord:
    scenario: str
    year: int
    cells: int
    fallback_counts: dict[str, int]
    mask_loss: float
    clamped_cells: int
    missing_employable: tuple[str, ...]
    corrected: bool
    outputs: tuple[Path, ...]


@dataclass(frozen=True, eq=False)
class ScenarioResult:
    scenario: str
    records: tuple[DeploymentRecord, ...]
    workers: Mapping[int, Raster]
    corrected_workers: Mapping[int, Raster]
    corrections: CorrectionTable
    admin: ZoneMap


def deploy_scenario(
    model: FittedModel,
    scenario: str,
    years: Sequence[int],
    load_inputs: Callable[[str, int], StackInputs],
    out_dir: PathLike,
    grid: GridSpec = DEPLOY_GRID,
    employable: Optional[Mapping[tuple[str, int], float]] = None,
    reference: Optional[Mapping[tuple[str, int], float]] = None,
    carry: bool = False,
    formats: Sequence[str] = ("gwg",),
) -> ScenarioResult:
    """Run all years of one scenario in order (carry-forward needs earlier years)."""
    out_dir = Path(out_dir)
    ref_years = sorted({y for _, y in (reference or {})})
    records: list[DeploymentRecord] = []
    workers_by_year: dict[int, Raster] = {}
    corrected_by_year: dict[int, Raster] = {}
    entries: list[CorrectionEntry] = []
    omitted: list[tuple[str, int, str]] = []
    last_table: Optional[CorrectionTable] = None
    admin: Optional[ZoneMap] = None

    for year in sorted(years):
        ratios = {u: r for (u, y), r in (employable or {}).items() if y == year}
        stack = build_stack(load_inputs(scenario, year), year, scenario, grid, ratios)
        admin = stack.admin2
        countries = group_zones(stack.admin2, "country")
        result = predict_grid(model, stack)
        workers, missing = workers_raster(result.epwa, stack.total, stack.employable, countries)
        workers_by_year[year] = workers

        paths: list[Path] = []
        for ext in formats:
            paths.append(write_raster(result.epwa, out_dir / output_name("epwa", scenario, year, False, ext)))
            paths.append(write_raster(workers, out_dir / output_name("workers", scenario, year, False, ext)))

        table: Optional[CorrectionTable] = None
        if reference and year in ref_years:
            table = correction_factors(reference, result.epwa, stack.total, countries, year)
        elif reference and carry and last_table is not None and ref_years and year > ref_years[-1]:
            table = carry_forward(last_table, last_table.entries[0].year, year) if last_table.entries else None

        clamped = 0
        if table is not None:
            corrected = apply_correction(result.epwa, table, countries)
            corrected_workers, _ = workers_raster(corrected.raster, stack.total, stack.employable, countries)
            corrected_by_year[year] = corrected_workers
            for ext in formats:
                paths.append(write_raster(corrected.raster, out_dir / output_name("epwa", scenario, year, True, ext)))
                paths.append(write_raster(corrected_workers, out_dir / output_name("workers", scenario, year, True, ext)))
            entries.extend(corrected.table.entries)
            omitted.extend(corrected.table.omitted)
            clamped = corrected.clamped_cells
            if year in ref_years:
                last_table = corrected.table

        records.append(DeploymentRecord(
            scenario=scenario,
            year=year,
            cells=int(result.epwa.valid_mask().sum()),
            fallback_counts=result.fallback_counts,
            mask_loss=stack.mask_loss,
            clamped_cells=clamped,
            missing_employable=tuple(missing),
            corrected=table is not None,
            outputs=tuple(paths),
        ))

    return ScenarioResult(
        scenario=scenario,
        records=tuple(records),
        workers=workers_by_year,
        corrected_workers=corrected_by_year,
        corrections=CorrectionTable(tuple(entries), tuple(omitted)),
        admin=admin,
    )


def deploy_all(
    model: FittedModel,
    scenarios: Sequence[str],
    years: Sequence[int],
    load_inputs: Callable[[str, int], StackInputs],
    out_dir: PathLike,
    threads: int = 1,
    **kwargs,
) -> list[ScenarioResult]:
    """Scenarios run concurrently; results keep the order of ``scenarios``."""
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(
            lambda s: deploy_scenario(model, s, years, load_inputs, out_dir, **kwargs), scenarios
        ))


def deployment_frame(results: Sequence[ScenarioResult]) -> pd.DataFrame:
    rows = []
    for res in results:
        for r in res.records:
            rows.append([
                r.scenario, r.year, r.cells,
                r.fallback_counts.get("country", 0), r.fallback_counts.get("region", 0),
                r.fallback_counts.get("none", 0), r.fallback_counts.get("fixed", 0),
                r.mask_loss, r.clamped_cells, len(r.missing_employable), int(r.corrected),
            ])
    return pd.DataFrame(rows, columns=[
        "scenario", "year", "cells", "country", "region", "none", "fixed",
        "mask_loss", "clamped_cells", "missing_employable", "corrected",
    ])
