#!/usr/bin/env python3
"""
Label harmonization and per-unit feature assembly.

Labels: national (admin level 0) and subnational (levels 1-2) EPWA observations
merged so that each country contributes records from exactly one source,
preferring subnational data where it exists.

Features: per unit-year zonal statistics turned into the log-scale predictor
vector [ln rural proportion, ln population density, ln median GDP per capita,
ln agricultural land fraction].
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
import structlog

if __package__:
    from .raster import (
        AGLAND, Raster, ZoneMap, check_aligned, interpolate_population_series, zonal_stat,
    )
else:
    from raster import (
        AGLAND, Raster, ZoneMap, check_aligned, interpolate_population_series, zonal_stat,
    )

log = structlog.get_logger(__name__)

PathLike = Union[str, Path]

# =============================================================================
# Constants
# =============================================================================

EPS_RATIO = 1e-6
EPS_POS = 1e-3
EPS_Y = 1e-6

YEAR_MIN = 2000
YEAR_MAX = 2020
ADMIN_LEVELS = (0, 1, 2)

NATIONAL_ONLY = "national_only"
SUBNATIONAL = "subnational"

AGLAND_MODES = ("combined", "split")

FEATURE_NAMES = ("ln_rural_prop", "ln_pop_density", "ln_gdp_median", "ln_agland")
SPLIT_FEATURE_NAMES = ("ln_cropland", "ln_pasture")

LABEL_COLUMNS = ["unit_id", "country_iso3", "region_code", "admin_level", "year", "epwa"]
FEATURE_COLUMNS = ["unit_id", "country_iso3", "region_code", "year", *FEATURE_NAMES]


@dataclass(frozen=True)
class Subregion:
    m49: str
    name: str
    abbreviation: str


# UN geoscheme subregions. Abbreviations follow the validation report
# convention (SA = South America, CA = Central America, NA = Northern America).
UN_SUBREGIONS: tuple[Subregion, ...] = (
    Subregion("015", "Northern Africa", "NAF"),
    Subregion("014", "Eastern Africa", "EAF"),
    Subregion("017", "Middle Africa", "MAF"),
    Subregion("018", "Southern Africa", "SAF"),
    Subregion("011", "Western Africa", "WAF"),
    Subregion("029", "Caribbean", "CAR"),
    Subregion("013", "Central America", "CA"),
    Subregion("005", "South America", "SA"),
    Subregion("021", "Northern America", "NA"),
    Subregion("143", "Central Asia", "CAS"),
    Subregion("030", "Eastern Asia", "EA"),
    Subregion("035", "South-eastern Asia", "SEA"),
    Subregion("034", "Southern Asia", "SAS"),
    Subregion("145", "Western Asia", "WAS"),
    Subregion("151", "Eastern Europe", "EE"),
    Subregion("154", "Northern Europe", "NE"),
    Subregion("039", "Southern Europe", "SE"),
    Subregion("155", "Western Europe", "WE"),
    Subregion("053", "Australia and New Zealand", "ANZ"),
    Subregion("054", "Melanesia", "MEL"),
    Subregion("057", "Micronesia", "MIC"),
    Subregion("061", "Polynesia", "POL"),
)


def region_label(code: str) -> str:
    """Report abbreviation for a region given as M49 code, name or abbreviation."""
    for sub in UN_SUBREGIONS:
        if code in (sub.m49, sub.name, sub.abbreviation):
            return sub.abbreviation
    return code


class LabelDomainError(ValueError):
    """Raised when a label value, year or admin level is out of range."""


class DuplicateLabelError(ValueError):
    """Raised when (unit_id, year) pairs repeat."""


class LabelJoinError(ValueError):
    """Raised when labels cannot be joined to feature rows."""


# =============================================================================
# Label types
# =============================================================================

@dataclass(frozen=True, order=True)
class LabelRecord:
    unit_id: str
    country_iso3: str
    region_code: str
    admin_level: int
    year: int
    epwa: float

    def __post_init__(self) -> None:
        if self.admin_level not in ADMIN_LEVELS:
            raise LabelDomainError(f"{self.unit_id}: admin_level {self.admin_level!r} not in {ADMIN_LEVELS}")
        if not YEAR_MIN <= self.year <= YEAR_MAX:
            raise LabelDomainError(f"{self.unit_id}: year {self.year} outside [{YEAR_MIN}, {YEAR_MAX}]")
        if not (math.isfinite(self.epwa) and 0.0 <= self.epwa <= 1.0):
            raise LabelDomainError(f"{self.unit_id}/{self.year}: epwa {self.epwa!r} outside [0, 1]")
        if self.admin_level == 0 and self.unit_id != self.country_iso3:
            raise LabelDomainError(
                f"national record unit_id '{self.unit_id}' must equal country_iso3 '{self.country_iso3}'"
            )

    @property
    def key(self) -> tuple[str, int]:
        return (self.unit_id, self.year)


def _record_sort_key(r: LabelRecord) -> tuple:
    return (r.country_iso3, r.admin_level, r.unit_id, r.year)


@dataclass(frozen=True)
class LabelSet:
    """Merged labels. ``withheld_national`` holds national records dropped for subnational countries."""

    records: tuple[LabelRecord, ...]
    provenance: Mapping[str, str]
    withheld_national: tuple[LabelRecord, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        by_country: dict[str, set[bool]] = {}
        for r in self.records:
            by_country.setdefault(r.country_iso3, set()).add(r.admin_level == 0)
        mixed = sorted(c for c, kinds in by_country.items() if len(kinds) > 1)
        if mixed:
            raise LabelDomainError(f"countries with both national and subnational records: {mixed}")

    def __len__(self) -> int:
        return len(self.records)

    def countries(self) -> list[str]:
        return sorted({r.country_iso3 for r in self.records})

    def subnational_countries(self) -> list[str]:
        return sorted(c for c, p in self.provenance.items() if p == SUBNATIONAL)

    def national_records(self) -> list[LabelRecord]:
        return [r for r in self.records if r.admin_level == 0]

    def subnational_records(self) -> list[LabelRecord]:
        return [r for r in self.records if r.admin_level >= 1]

    def regions(self) -> list[str]:
        return sorted({r.region_code for r in self.records})

    def country_regions(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for r in (*self.records, *self.withheld_national):
            out.setdefault(r.country_iso3, r.region_code)
        return out


def merge_labels(national: Iterable[LabelRecord], subnational: Iterable[LabelRecord]) -> LabelSet:
    """Combine national and subnational labels, using national data only where no subnational data exists."""
    national = list(national)
    subnational = list(subnational)

    wrong_nat = [r.unit_id for r in national if r.admin_level != 0]
    if wrong_nat:
        raise LabelDomainError(f"national input holds subnational records: {sorted(set(wrong_nat))[:10]}")
    wrong_sub = [r.unit_id for r in subnational if r.admin_level < 1]
    if wrong_sub:
        raise LabelDomainError(f"subnational input holds national records: {sorted(set(wrong_sub))[:10]}")

    counts = Counter(r.key for r in (*national, *subnational))
    duplicates = sorted(k for k, n in counts.items() if n > 1)
    if duplicates:
        listed = ", ".join(f"{u}/{y}" for u, y in duplicates[:20])
        raise DuplicateLabelError(f"{len(duplicates)} duplicate (unit_id, year) pairs: {listed}")

    sub_countries = {r.country_iso3 for r in subnational}
    kept = [r for r in national if r.country_iso3 not in sub_countries]
    withheld = [r for r in national if r.country_iso3 in sub_countries]

    provenance = {c: NATIONAL_ONLY for c in sorted({r.country_iso3 for r in kept})}
    provenance.update({c: SUBNATIONAL for c in sorted(sub_countries)})

    return LabelSet(
        records=tuple(sorted((*kept, *subnational), key=_record_sort_key)),
        provenance=dict(sorted(provenance.items())),
        withheld_national=tuple(sorted(withheld, key=_record_sort_key)),
    )


def read_label_records(path: PathLike) -> list[LabelRecord]:
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    missing = [c for c in LABEL_COLUMNS if c not in df.columns]
    if missing:
        raise LabelDomainError(f"{path}: labels missing columns {missing}")
    records = []
    for row in df.itertuples(index=False):
        try:
            admin_level, year, epwa = int(row.admin_level), int(row.year), float(row.epwa)
        except ValueError as exc:
            raise LabelDomainError(f"{path}: bad numeric field in row for '{row.unit_id}'") from exc
        records.append(LabelRecord(row.unit_id, row.country_iso3, row.region_code, admin_level, year, epwa))
    return records


def read_labels(path: PathLike) -> LabelSet:
    """Load labels.csv, split by admin level and merge."""
    records = read_label_records(path)
    national = [r for r in records if r.admin_level == 0]
    subnational = [r for r in records if r.admin_level >= 1]
    labels = merge_labels(national, subnational)
    log.info(
        "labels_loaded",
        path=str(path),
        records=len(labels),
        withheld_national=len(labels.withheld_national),
        subnational_countries=len(labels.subnational_countries()),
    )
    return labels


def squeeze_response(y):
    """Map y in [0, 1] into (0, 1): min(max(y, eps), 1 - eps); moved values are counted in the log."""
    arr = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any((arr < 0.0) | (arr > 1.0)):
        raise LabelDomainError(f"response outside [0, 1]: {y!r}")
    out = np.clip(arr, EPS_Y, 1.0 - EPS_Y)
    squeezed = int(np.count_nonzero(out != arr))
    if squeezed:
        log.info("response_squeezed", count=squeezed, eps=EPS_Y)
    return float(out) if out.ndim == 0 else out


# =============================================================================
# Features
# =============================================================================

def log_floor_ratio(value):
    return np.log(np.maximum(value, EPS_RATIO))


def log_floor_positive(value):
    return np.log(np.maximum(value, EPS_POS))


@dataclass(frozen=True)
class UnitFeatures:
    unit_id: str
    country_iso3: str
    region_code: str
    year: int
    ln_rural_prop: float
    ln_pop_density: float
    ln_gdp_median: float
    ln_agland: float
    ln_cropland: Optional[float] = None
    ln_pasture: Optional[float] = None

    def __post_init__(self) -> None:
        for name in FEATURE_NAMES:
            if not math.isfinite(getattr(self, name)):
                raise LabelDomainError(f"{self.unit_id}/{self.year}: feature {name} is not finite")

    @property
    def key(self) -> tuple[str, int]:
        return (self.unit_id, self.year)

    def value(self, name: str) -> float:
        v = getattr(self, name, None)
        if v is None:
            raise LabelJoinError(f"feature '{name}' not available for {self.unit_id}/{self.year}")
        return float(v)


def combined_agland(cropland: Raster, pasture: Raster) -> Raster:
    """Cropland + pasture fraction clamped to 1; nodata where either layer is missing."""
    check_aligned(cropland.spec, pasture.spec, "cropland and pasture")
    valid = cropland.valid_mask() & pasture.valid_mask()
    values = np.full(cropland.spec.shape, cropland.spec.nodata, dtype=np.float64)
    values[valid] = np.minimum(cropland.values[valid] + pasture.values[valid], 1.0)
    return Raster(cropland.spec, values, AGLAND, cropland.year, cropland.scenario)


def compute_unit_features(
    rural: Raster,
    total: Raster,
    gdp_pc: Raster,
    cropland: Raster,
    pasture: Raster,
    zones: ZoneMap,
    cell_area: Raster,
    year: int,
    agland_mode: str = "combined",
) -> tuple[list[UnitFeatures], list[tuple[str, str]]]:
    """Return (features, skipped) where skipped holds (unit_id, reason)."""
    if agland_mode not in AGLAND_MODES:
        raise LabelDomainError(f"unknown agland_mode '{agland_mode}'. Supported: {', '.join(AGLAND_MODES)}")
    for name, r in (("rural", rural), ("total", total), ("gdp_pc", gdp_pc),
                    ("cropland", cropland), ("pasture", pasture), ("cell_area", cell_area)):
        check_aligned(r.spec, zones.spec, f"{name} raster and zone map")

    rural_sum = zonal_stat(rural, zones, "sum")
    total_sum = zonal_stat(total, zones, "sum")
    area_sum = zonal_stat(cell_area, zones, "sum")
    gdp_median = zonal_stat(gdp_pc, zones, "median")
    agland_mean = zonal_stat(combined_agland(cropland, pasture), zones, "mean")
    if agland_mode == "split":
        crop_mean = zonal_stat(cropland, zones, "mean")
        pasture_mean = zonal_stat(pasture, zones, "mean")

    features: list[UnitFeatures] = []
    skipped: list[tuple[str, str]] = []
    for unit in zones.units():
        uid = unit.unit_id
        total_pop = total_sum.get(uid, 0.0)
        if total_pop <= 0.0:
            skipped.append((uid, "zero_total_population"))
            continue
        if uid not in gdp_median:
            skipped.append((uid, "no_gdp_cells"))
            continue
        if uid not in agland_mean:
            skipped.append((uid, "no_agland_cells"))
            continue
        area = area_sum.get(uid, 0.0)
        if area <= 0.0:
            skipped.append((uid, "zero_area"))
            continue

        ratio = min(rural_sum.get(uid, 0.0) / total_pop, 1.0)
        extra = {}
        if agland_mode == "split":
            extra = {
                "ln_cropland": float(log_floor_ratio(crop_mean.get(uid, 0.0))),
                "ln_pasture": float(log_floor_ratio(pasture_mean.get(uid, 0.0))),
            }
        features.append(UnitFeatures(
            unit_id=uid,
            country_iso3=unit.country_iso3,
            region_code=unit.region_code,
            year=year,
            ln_rural_prop=float(log_floor_ratio(ratio)),
            ln_pop_density=float(log_floor_positive(total_pop / area)),
            ln_gdp_median=float(log_floor_positive(gdp_median[uid])),
            ln_agland=float(log_floor_ratio(agland_mean[uid])),
            **extra,
        ))
    return features, skipped


def build_unit_features(
    rural: Raster,
    total: Raster,
    gdp_pc: Raster,
    cropland: Raster,
    pasture: Raster,
    zones: ZoneMap,
    cell_area: Raster,
    year: int,
    agland_mode: str = "combined",
) -> list[UnitFeatures]:
    features, skipped = compute_unit_features(
        rural, total, gdp_pc, cropland, pasture, zones, cell_area, year, agland_mode
    )
    for uid, reason in skipped:
        log.warning("unit_skipped", unit_id=uid, year=year, reason=reason)
    log.info("unit_features_built", year=year, units=len(features), skipped=len(skipped))
    return features


def build_feature_table(
    rural_anchors: Mapping[int, Raster],
    total_anchors: Mapping[int, Raster],
    gdp_by_year: Mapping[int, Raster],
    cropland: Raster,
    pasture: Raster,
    zones: ZoneMap,
    cell_area: Raster,
    years: Sequence[int],
    agland_mode: str = "combined",
) -> list[UnitFeatures]:
    """Features for each label year: populations interpolated from anchors, GDP taken per year."""
    rows: list[UnitFeatures] = []
    for year in sorted(set(years)):
        if year not in gdp_by_year:
            raise LabelJoinError(f"no GDP raster for year {year}")
        rural = interpolate_population_series(rural_anchors, year)
        total = interpolate_population_series(total_anchors, year)
        rows.extend(build_unit_features(
            rural, total, gdp_by_year[year], cropland, pasture, zones, cell_area, year, agland_mode
        ))
    return sorted(rows, key=lambda f: (f.unit_id, f.year))


def feature_columns(agland_mode: str = "combined") -> list[str]:
    return FEATURE_COLUMNS + (list(SPLIT_FEATURE_NAMES) if agland_mode == "split" else [])


def write_features(features: Sequence[UnitFeatures], path: PathLike, agland_mode: str = "combined") -> Path:
    columns = feature_columns(agland_mode)
    rows = [[getattr(f, c) for c in columns] for f in sorted(features, key=lambda f: (f.unit_id, f.year))]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path


def read_features(path: PathLike) -> list[UnitFeatures]:
    df = pd.read_csv(path, dtype={"unit_id": str, "country_iso3": str, "region_code": str},
                     keep_default_na=False, float_precision="round_trip", encoding="utf-8")
    missing = [c for c in FEATURE_COLUMNS if c not in df.columns]
    if missing:
        raise LabelJoinError(f"{path}: features missing columns {missing}")
    split = all(c in df.columns for c in SPLIT_FEATURE_NAMES)
    out = []
    for row in df.to_dict(orient="records"):
        kwargs = {c: row[c] for c in FEATURE_COLUMNS}
        kwargs["year"] = int(kwargs["year"])
        for name in FEATURE_NAMES:
            kwargs[name] = float(kwargs[name])
        if split:
            for name in SPLIT_FEATURE_NAMES:
                kwargs[name] = float(row[name])
        out.append(UnitFeatures(**kwargs))
    return out


def join_labels(
    records: Iterable[LabelRecord],
    features: Iterable[UnitFeatures],
) -> list[tuple[LabelRecord, UnitFeatures]]:
    """Pair each label with its (unit_id, year) feature row; every label must join."""
    by_key: dict[tuple[str, int], UnitFeatures] = {}
    for f in features:
        if f.key in by_key:
            raise DuplicateLabelError(f"duplicate feature row for {f.unit_id}/{f.year}")
        by_key[f.key] = f
    joined, missing = [], []
    for r in records:
        f = by_key.get(r.key)
        if f is None:
            missing.append(r.key)
        else:
            joined.append((r, f))
    if missing:
        listed = ", ".join(f"{u}/{y}" for u, y in sorted(missing)[:20])
        raise LabelJoinError(f"{len(missing)} labels have no feature row: {listed}")
    return joined
