#!/usr/bin/env python3
"""
Georeferenced grid primitives for agworkforce.

Provides:
- GridSpec / Raster / ZoneMap value types (immutable after construction)
- Resampling to a common extent and resolution
- Zonal statistics (mean, median, sum) over administrative zone maps
- Exponential population interpolation between census anchor years
- Broadcasting per-unit tables back onto the grid
- Spherical cell areas and deployment-time population flooring

All reductions run in row-major cell order so results never depend on how
callers partition work.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np
import scipy.sparse as sp

# =============================================================================
# Constants
# =============================================================================

DEFAULT_NODATA = -9999.0
ZONE_NODATA = -1
GRID_TOLERANCE = 1e-9
EARTH_RADIUS_KM = 6371.0088

# Variable tags used across the pipeline
RURAL = "rural"
TOTAL = "total"
GDP_PC = "gdp_pc"
CROPLAND = "cropland"
PASTURE = "pasture"
AGLAND = "agland"
EPWA = "epwa"
WORKERS = "workers"
CELL_AREA = "cell_area"

FRACTION_VARIABLES = {CROPLAND, PASTURE, AGLAND, EPWA, "land_fraction"}
COUNT_VARIABLES = {RURAL, TOTAL, WORKERS, "population"}

RESAMPLE_METHODS = ("nearest", "block_mean", "block_sum", "area_weighted_mean")
ZONAL_STATS = ("mean", "median", "sum")


class RasterError(ValueError):
    """Base error for invalid rasters or raster operations."""


class ExtentError(RasterError):
    """Raised when source and target extents do not overlap."""


class RatioError(RasterError):
    """Raised when block resampling needs an integer cell-size ratio or aligned origin."""


class AlignmentError(RasterError):
    """Raised when two grids that must match cell-for-cell differ."""


class RasterRangeError(RasterError):
    """Raised when an interpolation year lies outside its anchors."""


# =============================================================================
# Grid geometry
# =============================================================================

def _integral_count(span: float, cell_size: float, axis: str) -> int:
    raw = span / cell_size
    count = int(round(raw))
    if abs(raw - count) > GRID_TOLERANCE or count < 1:
        raise RasterError(
            f"{axis} span {span!r} is not an integer multiple of cell_size {cell_size!r} (ratio {raw!r})"
        )
    return count


@dataclass(frozen=True)
class GridSpec:
    """North-up regular lon/lat grid; row 0 is the northernmost row."""

    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float
    cell_size: float
    n_rows: int
    n_cols: int
    nodata: float = DEFAULT_NODATA

    def __post_init__(self) -> None:
        if not self.cell_size > 0:
            raise RasterError(f"cell_size must be > 0, got {self.cell_size!r}")
        if not self.lon_min < self.lon_max:
            raise RasterError(f"lon_min {self.lon_min!r} must be < lon_max {self.lon_max!r}")
        if not self.lat_min < self.lat_max:
            raise RasterError(f"lat_min {self.lat_min!r} must be < lat_max {self.lat_max!r}")
        n_cols = _integral_count(self.lon_max - self.lon_min, self.cell_size, "longitude")
        n_rows = _integral_count(self.lat_max - self.lat_min, self.cell_size, "latitude")
        if (n_rows, n_cols) != (self.n_rows, self.n_cols):
            raise RasterError(
                f"declared shape {(self.n_rows, self.n_cols)} != extent-derived shape {(n_rows, n_cols)}"
            )

    @classmethod
    def from_extent(
        cls,
        lon_min: float,
        lon_max: float,
        lat_min: float,
        lat_max: float,
        cell_size: float,
        nodata: float = DEFAULT_NODATA,
    ) -> "GridSpec":
        n_cols = _integral_count(lon_max - lon_min, cell_size, "longitude")
        n_rows = _integral_count(lat_max - lat_min, cell_size, "latitude")
        return cls(float(lon_min), float(lon_max), float(lat_min), float(lat_max),
                   float(cell_size), n_rows, n_cols, float(nodata))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def size(self) -> int:
        return self.n_rows * self.n_cols

    def cell_centers_lon(self) -> np.ndarray:
        return self.lon_min + (np.arange(self.n_cols) + 0.5) * self.cell_size

    def cell_centers_lat(self) -> np.ndarray:
        return self.lat_max - (np.arange(self.n_rows) + 0.5) * self.cell_size

    def overlaps(self, other: "GridSpec") -> bool:
        return (
            self.lon_min < other.lon_max
            and other.lon_min < self.lon_max
            and self.lat_min < other.lat_max
            and other.lat_min < self.lat_max
        )

    def same_geometry(self, other: "GridSpec") -> bool:
        """Same cells, ignoring the nodata sentinel."""
        return (
            self.lon_min == other.lon_min
            and self.lat_max == other.lat_max
            and self.cell_size == other.cell_size
            and self.shape == other.shape
        )


# Deployment grid: 1/12 degree (the "0.083 degree" grid) over (-180, 180, -56, 84).
DEPLOY_GRID = GridSpec.from_extent(-180.0, 180.0, -56.0, 84.0, 1.0 / 12.0)


def nodata_mask(values: np.ndarray, nodata: float) -> np.ndarray:
    if math.isnan(nodata):
        return np.isnan(values)
    return values == nodata


def variable_kind(variable_id: str) -> Optional[str]:
    if variable_id in FRACTION_VARIABLES:
        return "fraction"
    if variable_id in COUNT_VARIABLES:
        return "count"
    return None


# =============================================================================
# Raster and zone map types
# =============================================================================

@dataclass(frozen=True, eq=False)
class Raster:
    """One variable on a grid. ``values`` is a read-only (n_rows, n_cols) float64 array."""

    spec: GridSpec
    values: np.ndarray
    variable_id: str = "value"
    year: int = 0
    scenario: str = "observed"

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim == 1 and values.size == self.spec.size:
            values = values.reshape(self.spec.shape)
        if values.shape != self.spec.shape:
            raise RasterError(f"values shape {values.shape} != grid shape {self.spec.shape}")

        valid = ~nodata_mask(values, self.spec.nodata)
        data = values[valid]
        if not np.all(np.isfinite(data)):
            raise RasterError(f"{self.variable_id}: non-nodata values must be finite")
        kind = variable_kind(self.variable_id)
        if kind == "fraction" and data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise RasterError(f"{self.variable_id}: fraction values must lie in [0, 1]")
        if kind == "count" and data.size and data.min() < 0.0:
            raise RasterError(f"{self.variable_id}: population values must be >= 0")

        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def valid_mask(self) -> np.ndarray:
        return ~nodata_mask(self.values, self.spec.nodata)

    def with_values(self, values: np.ndarray, **changes) -> "Raster":
        return replace(self, values=values, **changes)


@dataclass(frozen=True)
class ZoneUnit:
    unit_id: str
    country_iso3: str
    region_code: str


@dataclass(frozen=True, eq=False)
class ZoneMap:
    """Integer zone ids on a grid plus the legend mapping ids to geographic units."""

    spec: GridSpec
    zone_ids: np.ndarray
    legend: Mapping[int, ZoneUnit] = field(default_factory=dict)
    nodata: int = ZONE_NODATA

    def __post_init__(self) -> None:
        ids = np.array(self.zone_ids, dtype=np.int64)
        if ids.ndim == 1 and ids.size == self.spec.size:
            ids = ids.reshape(self.spec.shape)
        if ids.shape != self.spec.shape:
            raise RasterError(f"zone_ids shape {ids.shape} != grid shape {self.spec.shape}")

        legend = {int(k): v for k, v in sorted(self.legend.items())}
        present = np.unique(ids[ids != self.nodata])
        missing = [int(z) for z in present if int(z) not in legend]
        if missing:
            raise RasterError(f"zone ids missing from legend: {missing[:10]}")
        unit_ids = [u.unit_id for u in legend.values()]
        if len(set(unit_ids)) != len(unit_ids):
            raise RasterError("legend maps several zone ids to the same unit_id")

        ids.flags.writeable = False
        object.__setattr__(self, "zone_ids", ids)
        object.__setattr__(self, "legend", legend)

    def legend_keys(self) -> np.ndarray:
        return np.array(list(self.legend.keys()), dtype=np.int64)

    def units(self) -> list[ZoneUnit]:
        return list(self.legend.values())

    def unit_for(self, unit_id: str) -> Optional[ZoneUnit]:
        for unit in self.legend.values():
            if unit.unit_id == unit_id:
                return unit
        return None

    def dense_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (flat positions of zoned cells, dense legend index per zoned cell)."""
        flat = self.zone_ids.ravel()
        positions = np.flatnonzero(flat != self.nodata)
        dense = np.searchsorted(self.legend_keys(), flat[positions])
        return positions, dense


def check_aligned(a: GridSpec, b: GridSpec, what: str = "grids") -> None:
    if a != b:
        raise AlignmentError(f"{what} are not aligned: {a} vs {b}")


# =============================================================================
# Resampling
# =============================================================================

def _remap_nodata(values: np.ndarray, src_nodata: float, dst_nodata: float) -> np.ndarray:
    out = np.array(values, dtype=np.float64)
    out[nodata_mask(out, src_nodata)] = dst_nodata
    return out


def _nearest_indices(src: GridSpec, target: GridSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    cols = np.floor((target.cell_centers_lon() - src.lon_min) / src.cell_size).astype(np.int64)
    rows = np.floor((src.lat_max - target.cell_centers_lat()) / src.cell_size).astype(np.int64)
    col_ok = (cols >= 0) & (cols < src.n_cols)
    row_ok = (rows >= 0) & (rows < src.n_rows)
    return np.clip(rows, 0, src.n_rows - 1), np.clip(cols, 0, src.n_cols - 1), row_ok, col_ok


def _block_geometry(src: GridSpec, target: GridSpec) -> tuple[int, int, int]:
    raw_ratio = target.cell_size / src.cell_size
    ratio = int(round(raw_ratio))
    if ratio < 1 or abs(raw_ratio - ratio) > GRID_TOLERANCE:
        raise RatioError(
            f"target cell_size {target.cell_size!r} is not an integer multiple of source {src.cell_size!r}"
        )
    raw_x = (target.lon_min - src.lon_min) / src.cell_size
    raw_y = (src.lat_max - target.lat_max) / src.cell_size
    off_x, off_y = int(round(raw_x)), int(round(raw_y))
    if abs(raw_x - off_x) > GRID_TOLERANCE or abs(raw_y - off_y) > GRID_TOLERANCE:
        raise RatioError("target origin is not aligned to source cell edges")
    return ratio, off_y, off_x


def _block_reduce(src: Raster, target: GridSpec, how: str) -> np.ndarray:
    ratio, off_y, off_x = _block_geometry(src.spec, target)
    height, width = target.n_rows * ratio, target.n_cols * ratio

    window = np.zeros((height, width), dtype=np.float64)
    valid = np.zeros((height, width), dtype=bool)

    # intersection of the target window with the source array, in source indices
    r0, r1 = max(off_y, 0), min(off_y + height, src.spec.n_rows)
    c0, c1 = max(off_x, 0), min(off_x + width, src.spec.n_cols)
    if r0 < r1 and c0 < c1:
        block = src.values[r0:r1, c0:c1]
        ok = src.valid_mask()[r0:r1, c0:c1]
        window[r0 - off_y:r1 - off_y, c0 - off_x:c1 - off_x] = np.where(ok, block, 0.0)
        valid[r0 - off_y:r1 - off_y, c0 - off_x:c1 - off_x] = ok

    sums = window.reshape(target.n_rows, ratio, target.n_cols, ratio).sum(axis=(1, 3))
    counts = valid.reshape(target.n_rows, ratio, target.n_cols, ratio).sum(axis=(1, 3))

    out = np.full(target.shape, target.nodata, dtype=np.float64)
    has = counts > 0
    if how == "mean":
        out[has] = sums[has] / counts[has]
    else:
        out[has] = sums[has]
    return out


def _overlap_matrix(target_edges: np.ndarray, source_edges: np.ndarray) -> sp.csr_matrix:
    """Sparse (n_target x n_source) matrix of 1-D interval overlap lengths (edges ascending)."""
    n_t, n_s = len(target_edges) - 1, len(source_edges) - 1
    tol = GRID_TOLERANCE * min(np.min(np.diff(target_edges)), np.min(np.diff(source_edges)))
    rows: list[int] = []
    cols: list[int] = []
    data: list[float] = []
    for j in range(n_t):
        a, b = target_edges[j], target_edges[j + 1]
        lo = max(int(np.searchsorted(source_edges, a, side="right")) - 1, 0)
        hi = min(int(np.searchsorted(source_edges, b, side="left")), n_s)
        for k in range(lo, hi):
            overlap = min(b, source_edges[k + 1]) - max(a, source_edges[k])
            if overlap > tol:
                rows.append(j)
                cols.append(k)
                data.append(overlap)
    return sp.csr_matrix((data, (rows, cols)), shape=(n_t, n_s))


def _area_weighted_mean(src: Raster, target: GridSpec) -> np.ndarray:
    s, t = src.spec, target
    wx = _overlap_matrix(
        t.lon_min + np.arange(t.n_cols + 1) * t.cell_size,
        s.lon_min + np.arange(s.n_cols + 1) * s.cell_size,
    )
    # rows run north to south, so negated latitudes ascend with the row index
    wy = _overlap_matrix(
        -(t.lat_max - np.arange(t.n_rows + 1) * t.cell_size),
        -(s.lat_max - np.arange(s.n_rows + 1) * s.cell_size),
    )
    wy = wy @ sp.diags(np.cos(np.radians(s.cell_centers_lat())))

    valid = src.valid_mask().astype(np.float64)
    data = np.where(valid > 0, src.values, 0.0)
    num = np.asarray((wx @ np.asarray(wy @ data).T).T)
    den = np.asarray((wx @ np.asarray(wy @ valid).T).T)

    out = np.full(t.shape, t.nodata, dtype=np.float64)
    has = den > 0
    out[has] = num[has] / den[has]
    return out


def resample(src: Raster, target: GridSpec, method: str = "nearest") -> Raster:
    """Resample ``src`` onto ``target``.

    Methods: nearest, block_mean, block_sum (counts), area_weighted_mean.
    Nodata contributors are ignored; targets with no valid contributor get nodata.
    """
    if method not in RESAMPLE_METHODS:
        raise RasterError(f"unknown resample method '{method}'. Supported: {', '.join(RESAMPLE_METHODS)}")
    if not src.spec.overlaps(target):
        raise ExtentError(f"source extent {src.spec} does not overlap target {target}")

    if src.spec.same_geometry(target):
        values = _remap_nodata(src.values, src.spec.nodata, target.nodata)
    elif method == "nearest":
        rows, cols, row_ok, col_ok = _nearest_indices(src.spec, target)
        picked = src.values[np.ix_(rows, cols)]
        ok = np.outer(row_ok, col_ok) & ~nodata_mask(picked, src.spec.nodata)
        values = np.where(ok, picked, target.nodata)
    elif method == "block_mean":
        values = _block_reduce(src, target, "mean")
    elif method == "block_sum":
        values = _block_reduce(src, target, "sum")
    else:
        values = _area_weighted_mean(src, target)

    return Raster(target, values, src.variable_id, src.year, src.scenario)


def resample_zones(zones: ZoneMap, target: GridSpec) -> ZoneMap:
    """Nearest-neighbour resampling of a zone map (ids are categorical)."""
    if not zones.spec.overlaps(target):
        raise ExtentError(f"zone extent {zones.spec} does not overlap target {target}")
    if zones.spec.same_geometry(target):
        return ZoneMap(target, zones.zone_ids, zones.legend, zones.nodata)
    rows, cols, row_ok, col_ok = _nearest_indices(zones.spec, target)
    picked = zones.zone_ids[np.ix_(rows, cols)]
    ids = np.where(np.outer(row_ok, col_ok), picked, zones.nodata)
    return ZoneMap(target, ids, zones.legend, zones.nodata)


# =============================================================================
# Zonal statistics and broadcasting
# =============================================================================

def zonal_stat(value: Raster, zones: ZoneMap, stat: str = "mean") -> dict[str, float]:
    """Per-unit statistic over the unit's non-nodata cells.

    Units with no valid cell are omitted. Sums accumulate in row-major order.
    """
    if stat not in ZONAL_STATS:
        raise RasterError(f"unknown zonal statistic '{stat}'. Supported: {', '.join(ZONAL_STATS)}")
    check_aligned(value.spec, zones.spec, "value raster and zone map")

    positions, dense = zones.dense_index()
    vals = value.values.ravel()[positions]
    ok = ~nodata_mask(vals, value.spec.nodata)
    vals, dense = vals[ok], dense[ok]

    units = zones.units()
    counts = np.bincount(dense, minlength=len(units))

    if stat == "median":
        order = np.lexsort((vals, dense))
        ordered = vals[order]
        ends = np.cumsum(counts)
        result: dict[str, float] = {}
        for k, unit in enumerate(units):
            n = int(counts[k])
            if n == 0:
                continue
            seg = ordered[ends[k] - n:ends[k]]
            mid = n // 2
            result[unit.unit_id] = float(seg[mid]) if n % 2 else float((seg[mid - 1] + seg[mid]) / 2.0)
        return result

    sums = np.bincount(dense, weights=vals, minlength=len(units))
    result = {}
    for k, unit in enumerate(units):
        if counts[k] == 0:
            continue
        result[unit.unit_id] = float(sums[k]) if stat == "sum" else float(sums[k] / counts[k])
    return result


def broadcast_zonal(
    values: Mapping[str, float],
    zones: ZoneMap,
    variable_id: str = "broadcast",
    year: int = 0,
    scenario: str = "observed",
) -> Raster:
    """Paint each unit's table value onto its cells; units absent from the table become nodata."""
    units = zones.units()
    known = {u.unit_id for u in units}
    unknown = sorted(set(values) - known)
    if unknown:
        raise RasterError(f"table units missing from zone legend: {unknown[:10]}")

    lookup = np.array([values.get(u.unit_id, np.nan) for u in units], dtype=np.float64)
    out = np.full(zones.spec.size, zones.spec.nodata, dtype=np.float64)
    positions, dense = zones.dense_index()
    picked = lookup[dense] if len(units) else np.empty(0)
    has = ~np.isnan(picked)
    out[positions[has]] = picked[has]
    return Raster(zones.spec, out.reshape(zones.spec.shape), variable_id, year, scenario)


# =============================================================================
# Population interpolation
# =============================================================================

def interpolate_population(p1: Raster, p2: Raster, t1: int, t2: int, t: int) -> Raster:
    """Cellwise exponential interpolation between two population anchors.

    r = ln(P2/P1)/(t2-t1), P(t) = P1*exp(r*(t-t1)). Cells with exactly one zero
    anchor are interpolated linearly; nodata in either anchor propagates.
    """
    check_aligned(p1.spec, p2.spec, "population anchors")
    if not t1 < t2:
        raise RasterRangeError(f"anchor years must satisfy t1 < t2, got {t1}, {t2}")
    if not t1 <= t <= t2:
        raise RasterRangeError(f"year {t} outside anchor interval [{t1}, {t2}]")

    if t == t1:
        return replace(p1, year=t)
    if t == t2:
        return replace(p2, variable_id=p1.variable_id, year=t)

    a, b = p1.values, p2.values
    valid = p1.valid_mask() & p2.valid_mask()
    if np.any(a[valid] < 0) or np.any(b[valid] < 0):
        raise RasterError("population anchors must be non-negative")

    out = np.full(p1.spec.shape, p1.spec.nodata, dtype=np.float64)
    span = float(t2 - t1)
    positive = valid & (a > 0) & (b > 0)
    rate = np.log(b[positive] / a[positive]) / span
    out[positive] = a[positive] * np.exp(rate * (t - t1))

    linear = valid & ~positive
    out[linear] = a[linear] + (b[linear] - a[linear]) * ((t - t1) / span)
    return Raster(p1.spec, out, p1.variable_id, t, p1.scenario)


def interpolate_population_series(anchors: Mapping[int, Raster], t: int) -> Raster:
    """Interpolate from a set of anchor years (e.g. decadal) using the bracketing pair."""
    years = sorted(anchors)
    if not years:
        raise RasterRangeError("no population anchors supplied")
    if t in anchors:
        return replace(anchors[t], year=t)
    lower = [y for y in years if y < t]
    upper = [y for y in years if y > t]
    if not lower or not upper:
        raise RasterRangeError(f"year {t} outside anchor years [{years[0]}, {years[-1]}]")
    t1, t2 = lower[-1], upper[0]
    return interpolate_population(anchors[t1], anchors[t2], t1, t2, t)


def floor_subunit_population(raster: Raster) -> Raster:
    """Set cells holding less than one person to zero (deployment-time rule)."""
    values = np.array(raster.values)
    valid = raster.valid_mask()
    values[valid & (values > 0.0) & (values < 1.0)] = 0.0
    return raster.with_values(values)


def mask_mismatch_mass(population: Raster, mask: Raster) -> float:
    """Population on valid cells whose mask layer is nodata (land/sea mask disagreement)."""
    check_aligned(population.spec, mask.spec, "population and mask rasters")
    lost = population.valid_mask() & ~mask.valid_mask()
    return float(np.sum(population.values[lost]))


# =============================================================================
# Cell geometry
# =============================================================================

def cell_area_km2(spec: GridSpec) -> Raster:
    """Spherical cell areas in km^2 (rows differ, columns are identical)."""
    tops = np.radians(spec.lat_max - np.arange(spec.n_rows) * spec.cell_size)
    bottoms = np.radians(spec.lat_max - (np.arange(spec.n_rows) + 1) * spec.cell_size)
    row_area = EARTH_RADIUS_KM ** 2 * math.radians(spec.cell_size) * (np.sin(tops) - np.sin(bottoms))
    values = np.repeat(row_area[:, None], spec.n_cols, axis=1)
    return Raster(spec, values, CELL_AREA)
