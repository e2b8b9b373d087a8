#!/usr/bin/env python3
"""
Grid exchange formats.

- GWG1: little-endian binary (magic, f64 header, u32 shape, u8 dtype, row-major values)
- ESRI ASCII grid: interop import/export, values printed with 17 significant digits
- Zone legends: CSV with zone_id,unit_id,country_iso3,region_code
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

if __package__:
    from .raster import GridSpec, Raster, ZoneMap, ZoneUnit, ZONE_NODATA
else:
    from raster import GridSpec, Raster, ZoneMap, ZoneUnit, ZONE_NODATA

PathLike = Union[str, Path]

GWG1_MAGIC = b"GWG1"
GWG1_HEADER = struct.Struct("<6d2IB")
GWG1_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
GWG1_SUFFIXES = {".gwg", ".gwg1"}
ASCII_SUFFIXES = {".asc"}

LEGEND_COLUMNS = ["zone_id", "unit_id", "country_iso3", "region_code"]


class GridFormatError(ValueError):
    """Raised when a grid or legend file is malformed."""


# =============================================================================
# GWG1
# =============================================================================

def write_gwg1(raster: Raster, path: PathLike, dtype: str = "f64") -> Path:
    """Write a raster as GWG1. ``dtype`` is "f64" (lossless) or "f32"."""
    code = {"f32": 0, "f64": 1}.get(dtype)
    if code is None:
        raise GridFormatError(f"unsupported GWG1 dtype '{dtype}' (use f32 or f64)")
    spec = raster.spec
    header = GWG1_HEADER.pack(
        spec.lon_min, spec.lon_max, spec.lat_min, spec.lat_max, spec.cell_size, spec.nodata,
        spec.n_rows, spec.n_cols, code,
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(GWG1_MAGIC)
        fh.write(header)
        fh.write(np.ascontiguousarray(raster.values, dtype=GWG1_DTYPES[code]).tobytes())
    return path


def read_gwg1(path: PathLike, variable_id: str = "value", year: int = 0, scenario: str = "observed") -> Raster:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != GWG1_MAGIC:
        raise GridFormatError(f"{path}: not a GWG1 file (bad magic)")
    if len(data) < 4 + GWG1_HEADER.size:
        raise GridFormatError(f"{path}: truncated header")
    lon_min, lon_max, lat_min, lat_max, cell_size, nodata, n_rows, n_cols, code = GWG1_HEADER.unpack_from(data, 4)
    if code not in GWG1_DTYPES:
        raise GridFormatError(f"{path}: unknown dtype code {code}")

    dtype = GWG1_DTYPES[code]
    offset = 4 + GWG1_HEADER.size
    expected = n_rows * n_cols * dtype.itemsize
    if len(data) - offset != expected:
        raise GridFormatError(f"{path}: expected {expected} value bytes, found {len(data) - offset}")

    spec = GridSpec(lon_min, lon_max, lat_min, lat_max, cell_size, n_rows, n_cols, nodata)
    values = np.frombuffer(data, dtype=dtype, offset=offset).astype(np.float64).reshape(n_rows, n_cols)
    return Raster(spec, values, variable_id, year, scenario)


# =============================================================================
# ESRI ASCII grid
# =============================================================================

def write_ascii_grid(raster: Raster, path: PathLike) -> Path:
    spec = raster.spec
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"ncols {spec.n_cols}",
        f"nrows {spec.n_rows}",
        f"xllcorner {spec.lon_min:.17g}",
        f"yllcorner {spec.lat_min:.17g}",
        f"cellsize {spec.cell_size:.17g}",
        f"NODATA_value {spec.nodata:.17g}",
    ]
    body = "\n".join(" ".join(f"{v:.17g}" for v in row) for row in raster.values)
    path.write_text("\n".join(lines) + "\n" + body + "\n", encoding="utf-8")
    return path


def read_ascii_grid(path: PathLike, variable_id: str = "value", year: int = 0, scenario: str = "observed") -> Raster:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()

    header: dict[str, float] = {}
    idx = 0
    while idx < len(lines):
        parts = lines[idx].split()
        if len(parts) != 2 or not parts[0][0].isalpha():
            break
        try:
            header[parts[0].lower()] = float(parts[1])
        except ValueError as exc:
            raise GridFormatError(f"{path}: bad header line '{lines[idx]}'") from exc
        idx += 1

    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise GridFormatError(f"{path}: missing header key '{key}'")
    n_cols, n_rows, cell = int(header["ncols"]), int(header["nrows"]), header["cellsize"]

    if "xllcorner" in header:
        x0 = header["xllcorner"]
    elif "xllcenter" in header:
        x0 = header["xllcenter"] - cell / 2
    else:
        raise GridFormatError(f"{path}: missing xllcorner/xllcenter")
    if "yllcorner" in header:
        y0 = header["yllcorner"]
    elif "yllcenter" in header:
        y0 = header["yllcenter"] - cell / 2
    else:
        raise GridFormatError(f"{path}: missing yllcorner/yllcenter")
    nodata = header.get("nodata_value", -9999.0)

    try:
        values = np.array(" ".join(lines[idx:]).split(), dtype=np.float64)
    except ValueError as exc:
        raise GridFormatError(f"{path}: non-numeric cell value") from exc
    if values.size != n_rows * n_cols:
        raise GridFormatError(f"{path}: expected {n_rows * n_cols} values, found {values.size}")

    spec = GridSpec(x0, x0 + n_cols * cell, y0, y0 + n_rows * cell, cell, n_rows, n_cols, nodata)
    return Raster(spec, values.reshape(n_rows, n_cols), variable_id, year, scenario)


# =============================================================================
# Dispatch by suffix
# =============================================================================

def read_raster(path: PathLike, variable_id: str = "value", year: int = 0, scenario: str = "observed") -> Raster:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in GWG1_SUFFIXES:
        return read_gwg1(path, variable_id, year, scenario)
    if suffix in ASCII_SUFFIXES:
        return read_ascii_grid(path, variable_id, year, scenario)
    raise GridFormatError(f"{path}: unknown grid suffix '{suffix}' (expected .gwg or .asc)")


def write_raster(raster: Raster, path: PathLike) -> Path:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in GWG1_SUFFIXES:
        return write_gwg1(raster, path)
    if suffix in ASCII_SUFFIXES:
        return write_ascii_grid(raster, path)
    raise GridFormatError(f"{path}: unknown grid suffix '{suffix}' (expected .gwg or .asc)")


# =============================================================================
# Zone maps and legends
# =============================================================================

def read_legend(path: PathLike) -> dict[int, ZoneUnit]:
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    missing = [c for c in LEGEND_COLUMNS if c not in df.columns]
    if missing:
        raise GridFormatError(f"{path}: legend missing columns {missing}")
    legend: dict[int, ZoneUnit] = {}
    for row in df.itertuples(index=False):
        try:
            zone_id = int(row.zone_id)
        except ValueError as exc:
            raise GridFormatError(f"{path}: non-integer zone_id '{row.zone_id}'") from exc
        if zone_id in legend:
            raise GridFormatError(f"{path}: duplicate zone_id {zone_id}")
        legend[zone_id] = ZoneUnit(row.unit_id, row.country_iso3, row.region_code)
    return legend


def write_legend(legend: dict[int, ZoneUnit], path: PathLike) -> Path:
    rows = [(z, u.unit_id, u.country_iso3, u.region_code) for z, u in sorted(legend.items())]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=LEGEND_COLUMNS).to_csv(path, index=False, lineterminator="\n")
    return path


def read_zone_map(grid_path: PathLike, legend_path: PathLike) -> ZoneMap:
    """Zone ids are stored as a grid (nodata cells carry no unit)."""
    raster = read_raster(grid_path, variable_id="zone")
    valid = raster.valid_mask()
    ids = np.full(raster.spec.shape, ZONE_NODATA, dtype=np.int64)
    ids[valid] = np.rint(raster.values[valid]).astype(np.int64)
    if not np.array_equal(ids[valid].astype(np.float64), raster.values[valid]):
        raise GridFormatError(f"{grid_path}: zone grid holds non-integer ids")
    return ZoneMap(raster.spec, ids, read_legend(legend_path))


def write_zone_map(zones: ZoneMap, grid_path: PathLike, legend_path: PathLike) -> tuple[Path, Path]:
    values = zones.zone_ids.astype(np.float64)
    values[zones.zone_ids == zones.nodata] = zones.spec.nodata
    raster = Raster(zones.spec, values, "zone")
    return write_raster(raster, grid_path), write_legend(dict(zones.legend), legend_path)


__all__ = [
    "GridFormatError",
    "read_gwg1",
    "write_gwg1",
    "read_ascii_grid",
    "write_ascii_grid",
    "read_raster",
    "write_raster",
    "read_legend",
    "write_legend",
    "read_zone_map",
    "write_zone_map",
]
