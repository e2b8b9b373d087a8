"""
Unit tests for scripts/grid_io.py

Tests cover:
- GWG1 binary read/write (lossless f64, lossy f32, malformed files)
- ESRI ASCII grid interop
- Zone legends and zone maps
- Suffix dispatch
"""

from pathlib import Path

import numpy as np
import pytest

import sys
sys.path.insert(0, str(Path(__file__).parent.parent / "scripts"))

from grid_io import (
    GWG1_MAGIC,
    GridFormatError,
    read_ascii_grid,
    read_gwg1,
    read_legend,
    read_raster,
    read_zone_map,
    write_ascii_grid,
    write_gwg1,
    write_legend,
    write_raster,
    write_zone_map,
)
from raster import GridSpec, Raster, ZoneUnit


@pytest.fixture
def noisy_raster(small_grid) -> Raster:
    rng = np.random.default_rng(5)
    values = rng.normal(0.0, 1e6, small_grid.shape)
    values[1, 2] = small_grid.nodata
    return Raster(small_grid, values, "gdp_pc", 2010)


class TestGWG1:
    """Tests for the binary grid format."""

    def test_f64_is_bitwise_lossless(self, tmp_path, noisy_raster):
        """Values and geometry survive a write/read unchanged."""
        path = write_gwg1(noisy_raster, tmp_path / "g.gwg")
        back = read_gwg1(path, "gdp_pc", 2010)
        assert back.spec == noisy_raster.spec
        assert back.values.tobytes() == noisy_raster.values.tobytes()

    def test_file_layout(self, tmp_path, small_grid):
        """Magic, 57-byte header, then row-major values."""
        path = write_gwg1(Raster(small_grid, np.zeros(small_grid.shape)), tmp_path / "z.gwg")
        data = path.read_bytes()
        assert data[:4] == GWG1_MAGIC
        assert len(data) == 4 + 6 * 8 + 2 * 4 + 1 + small_grid.size * 8

    def test_f32_rounds(self, tmp_path, noisy_raster):
        """The f32 variant stores single precision."""
        path = write_gwg1(noisy_raster, tmp_path / "g.gwg", dtype="f32")
        back = read_gwg1(path)
        np.testing.assert_allclose(back.values, noisy_raster.values, rtol=1e-6)

    def test_bad_dtype(self, tmp_path, noisy_raster):
        """Only f32 and f64 are written."""
        with pytest.raises(GridFormatError):
            write_gwg1(noisy_raster, tmp_path / "g.gwg", dtype="i16")

    def test_bad_magic(self, tmp_path):
        """Files without the magic prefix are rejected."""
        path = tmp_path / "bad.gwg"
        path.write_bytes(b"NOPE" + b"\x00" * 100)
        with pytest.raises(GridFormatError, match="magic"):
            read_gwg1(path)

    def test_truncated_values(self, tmp_path, noisy_raster):
        """A short value block is rejected."""
        path = write_gwg1(noisy_raster, tmp_path / "g.gwg")
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(GridFormatError):
            read_gwg1(path)


class TestAsciiGrid:
    """Tests for ESRI ASCII grids."""

    def test_roundtrip(self, tmp_path, noisy_raster):
        """17 significant digits reproduce float64 values exactly."""
        path = write_ascii_grid(noisy_raster, tmp_path / "g.asc")
        back = read_ascii_grid(path)
        assert back.spec == noisy_raster.spec
        np.testing.assert_array_equal(back.values, noisy_raster.values)

    def test_center_registration(self, tmp_path):
        """xllcenter/yllcenter headers shift by half a cell."""
        path = tmp_path / "c.asc"
        path.write_text(
            "ncols 2\nnrows 1\nxllcenter 0.5\nyllcenter 0.5\ncellsize 1\nNODATA_value -9999\n1 2\n",
            encoding="utf-8",
        )
        r = read_ascii_grid(path)
        assert (r.spec.lon_min, r.spec.lat_min, r.spec.lon_max) == (0.0, 0.0, 2.0)
        assert r.values.tolist() == [[1.0, 2.0]]

    def test_missing_header(self, tmp_path):
        """ncols, nrows and cellsize are required."""
        path = tmp_path / "m.asc"
        path.write_text("ncols 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2\n", encoding="utf-8")
        with pytest.raises(GridFormatError, match="nrows"):
            read_ascii_grid(path)

    def test_value_count(self, tmp_path):
        """The body must hold nrows x ncols values."""
        path = tmp_path / "n.asc"
        path.write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2 3\n", encoding="utf-8")
        with pytest.raises(GridFormatError):
            read_ascii_grid(path)


class TestDispatch:
    """Tests for suffix-based format selection."""

    @pytest.mark.parametrize("name", ["r.gwg", "r.gwg1", "r.asc"])
    def test_known_suffixes(self, tmp_path, noisy_raster, name):
        """Both formats are reachable by suffix."""
        path = write_raster(noisy_raster, tmp_path / name)
        np.testing.assert_array_equal(read_raster(path).values, noisy_raster.values)

    def test_unknown_suffix(self, tmp_path, noisy_raster):
        """Unsupported suffixes are rejected on write and read."""
        with pytest.raises(GridFormatError, match="suffix"):
            write_raster(noisy_raster, tmp_path / "r.tif")
        with pytest.raises(GridFormatError, match="suffix"):
            read_raster(tmp_path / "r.tif")


class TestZoneFiles:
    """Tests for legends and zone maps."""

    def test_legend_roundtrip(self, tmp_path):
        """Legends keep ids and unit attributes."""
        legend = {3: ZoneUnit("KEN.1_1", "KEN", "EAF"), 0: ZoneUnit("NGA", "NGA", "WAF")}
        back = read_legend(write_legend(legend, tmp_path / "legend.csv"))
        assert back == legend

    def test_legend_missing_column(self, tmp_path):
        """All legend columns are required."""
        path = tmp_path / "legend.csv"
        path.write_text("zone_id,unit_id\n0,A\n", encoding="utf-8")
        with pytest.raises(GridFormatError, match="columns"):
            read_legend(path)

    def test_legend_duplicate_id(self, tmp_path):
        """Zone ids must be unique."""
        path = tmp_path / "legend.csv"
        path.write_text(
            "zone_id,unit_id,country_iso3,region_code\n0,A,AAA,SA\n0,B,BBB,SA\n", encoding="utf-8"
        )
        with pytest.raises(GridFormatError, match="duplicate"):
            read_legend(path)

    def test_zone_map_roundtrip(self, tmp_path, two_zone_map):
        """Zone grids keep ids, including unassigned cells."""
        ids = two_zone_map.zone_ids.copy()
        ids[0, 0] = two_zone_map.nodata
        zones = type(two_zone_map)(two_zone_map.spec, ids, two_zone_map.legend)
        grid, legend = write_zone_map(zones, tmp_path / "zones.gwg", tmp_path / "zones.csv")
        back = read_zone_map(grid, legend)
        np.testing.assert_array_equal(back.zone_ids, ids)
        assert back.legend == zones.legend

    def test_fractional_zone_ids(self, tmp_path, small_grid):
        """Zone grids must hold integers."""
        write_gwg1(Raster(small_grid, np.full(small_grid.shape, 0.5)), tmp_path / "z.gwg")
        write_legend({0: ZoneUnit("A", "AAA", "SA")}, tmp_path / "z.csv")
        with pytest.raises(GridFormatError, match="non-integer"):
            read_zone_map(tmp_path / "z.gwg", tmp_path / "z.csv")
