"""
Unit tests for scripts/model_store.py

Tests cover:
- Save/load of fitted models (including the nested regional model)
- Byte-stable re-saving
- Rejection of foreign or versioned-out artifacts
"""

import json
from pathlib import Path

import numpy as np
import pyarrow as pa
import pytest

import sys
sys.path.insert(0, str(Path(__file__).parent.parent / "scripts"))

from gamm import FitConfig, ModelData, ModelSpec, fit_data, predict_data
from model_store import (
    METADATA_KEY,
    ModelFormatError,
    load_model,
    model_from_table,
    model_to_table,
    save_model,
)


@pytest.fixture(scope="module")
def fitted(model_rows):
    labels, features, _ = model_rows
    data = ModelData.from_labels(labels.records, features)
    return fit_data(ModelSpec.default("smooths+RE"), data, FitConfig(lambda_points=4, sweeps=1)), data


class TestModelStore:
    """Tests for the Arrow model artifact."""

    def test_predictions_survive_roundtrip(self, tmp_path, fitted):
        """A loaded model predicts exactly like the fitted one."""
        model, data = fitted
        loaded = load_model(save_model(model, tmp_path / "model.arrow"))
        before, after = predict_data(model, data), predict_data(loaded, data)
        np.testing.assert_array_equal(before.mu, after.mu)
        assert before.path.tolist() == after.path.tolist()

    def test_resave_is_byte_identical(self, tmp_path, fitted):
        """save(load(save(m))) reproduces the first file byte for byte."""
        model, _ = fitted
        first = save_model(model, tmp_path / "a.arrow")
        second = save_model(load_model(first), tmp_path / "b.arrow")
        assert first.read_bytes() == second.read_bytes()

    def test_regional_model_kept(self, tmp_path, fitted):
        """The nested regional model and its effects are stored."""
        model, _ = fitted
        loaded = load_model(save_model(model, tmp_path / "model.arrow"))
        assert loaded.regional is not None
        assert loaded.region_effects() == model.region_effects()
        assert loaded.country_effects() == model.country_effects()
        assert loaded.spec == model.spec
        assert loaded.diagnostics == model.diagnostics

    def test_foreign_table_rejected(self):
        """Tables without model metadata are not models."""
        with pytest.raises(ModelFormatError, match="metadata"):
            model_from_table(pa.table({"name": ["x"]}))

    def test_version_mismatch(self, fitted):
        """Artifacts from another format version are refused."""
        model, _ = fitted
        table = model_to_table(model)
        meta = json.loads(table.schema.metadata[METADATA_KEY])
        meta["format_version"] = 99
        bumped = table.replace_schema_metadata({METADATA_KEY: json.dumps(meta).encode("utf-8")})
        with pytest.raises(ModelFormatError, match="version"):
            model_from_table(bumped)
