"""
Unit tests for scripts/export.py

Tests cover:
- CSV table formatting (decimals, line endings, precision)
- Run manifests (sorted, relative, digest-bearing, deterministic)
- Console tables
"""

import hashlib
import json
from pathlib import Path

import pandas as pd
import pytest

import sys
sys.path.insert(0, str(Path(__file__).parent.parent / "scripts"))

from export import (
    build_manifest,
    file_digest,
    frame_table,
    markdown_table,
    write_manifest,
    write_table,
)


class TestWriteTable:
    """Tests for CSV output."""

    def test_format(self, tmp_path):
        """Header row, '\\n' endings and 17 significant digits."""
        frame = pd.DataFrame({"unit_id": ["A1"], "value": [0.1]})
        path = write_table(frame, tmp_path / "t.csv")
        assert path.read_bytes() == b"unit_id,value\nA1,0.10000000000000001\n"

    def test_floats_roundtrip(self, tmp_path):
        """Values read back bit-for-bit."""
        values = [1.0 / 3.0, 2.0 ** -40, 123456.789]
        path = write_table(pd.DataFrame({"x": values}), tmp_path / "t.csv")
        back = pd.read_csv(path, float_precision="round_trip")["x"].tolist()
        assert back == values

    def test_rerun_identical(self, tmp_path):
        """Writing the same frame twice gives the same bytes."""
        frame = pd.DataFrame({"a": [1, 2], "b": [0.25, 1e-9]})
        first = write_table(frame, tmp_path / "a.csv").read_bytes()
        second = write_table(frame, tmp_path / "b.csv").read_bytes()
        assert first == second


class TestManifest:
    """Tests for run manifests."""

    def _outputs(self, root):
        (root / "sub").mkdir()
        (root / "b.csv").write_text("b\n", encoding="utf-8")
        (root / "a.csv").write_text("a\n", encoding="utf-8")
        (root / "sub" / "c.gwg").write_bytes(b"GWG1")
        return [root / "sub" / "c.gwg", root / "b.csv", root / "a.csv", root / "a.csv"]

    def test_entries_sorted_and_relative(self, tmp_path):
        """Outputs are deduplicated, sorted and relative to the output directory."""
        manifest = build_manifest("fit", "0.1.0", "abc", 7, self._outputs(tmp_path), tmp_path)
        assert [e["path"] for e in manifest["outputs"]] == ["a.csv", "b.csv", "sub/c.gwg"]
        assert manifest["outputs"][0]["bytes"] == 2
        assert manifest["outputs"][0]["sha256"] == hashlib.sha256(b"a\n").hexdigest()
        assert manifest["seed"] == 7

    def test_written_deterministically(self, tmp_path):
        """Two writes of the same run are byte-identical and carry no timestamps."""
        outputs = self._outputs(tmp_path)
        first = write_manifest(build_manifest("deploy", "0.1.0", "abc", None, outputs, tmp_path), tmp_path)
        content = first.read_bytes()
        second = write_manifest(build_manifest("deploy", "0.1.0", "abc", None, outputs, tmp_path), tmp_path)
        assert first.name == "manifest-deploy.json"
        assert second.read_bytes() == content
        assert set(json.loads(content)) == {"command", "version", "config_sha256", "seed", "outputs"}

    def test_file_digest(self, tmp_path):
        """File digests match in-memory digests."""
        path = tmp_path / "x.bin"
        path.write_bytes(b"\x00" * 3_000_000)
        assert file_digest(path) == hashlib.sha256(b"\x00" * 3_000_000).hexdigest()

    def test_outputs_outside_root(self, tmp_path):
        """Outputs must live under the manifest root."""
        other = tmp_path / "elsewhere.csv"
        other.write_text("x\n", encoding="utf-8")
        root = tmp_path / "out"
        root.mkdir()
        with pytest.raises(ValueError):
            build_manifest("fit", "0.1.0", "abc", 0, [other], root)


class TestConsoleTables:
    """Tests for pipe tables."""

    def test_markdown_table(self):
        """Pipe tables with four significant digits."""
        text = markdown_table(["strategy", "rmse"], [["spatial", 0.123456]])
        lines = text.splitlines()
        assert lines[0].startswith("| strategy")
        assert "0.1235" in lines[2]

    def test_frame_table_alignment(self):
        """Numeric columns align right, text columns left."""
        text = frame_table(pd.DataFrame({"name": ["a"], "n": [3]}))
        sep = text.splitlines()[1]
        assert sep.startswith("|:") and sep.endswith(":|")
