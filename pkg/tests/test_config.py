"""
Unit tests for scripts/config.py

Tests cover:
- Defaults and YAML merging
- Unknown keys and malformed values
- Path resolution and layer templates
- Thread settings and config digests
"""

import os
from pathlib import Path

import pytest
import yaml
from threadpoolctl import threadpool_info, threadpool_limits

import sys
sys.path.insert(0, str(Path(__file__).parent.parent / "scripts"))

from config import (
    CONFIG_ENV,
    DEFAULTS,
    THREAD_ENV_VARS,
    THREADS_ENV,
    ConfigError,
    check_paths,
    configure_threads,
    defaults_yaml,
    env_threads,
    load_config,
)


def write_config(tmp_path, data) -> Path:
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


class TestLoadConfig:
    """Tests for loading and merging run configs."""

    def test_defaults_without_file(self, monkeypatch):
        """No path and no AGWORK_CONFIG gives the defaults rooted at cwd."""
        monkeypatch.delenv(CONFIG_ENV, raising=False)
        cfg = load_config()
        assert cfg.data == DEFAULTS
        assert cfg.base_dir == Path.cwd()
        assert cfg.source is None

    def test_nested_merge(self, tmp_path):
        """Sections merge key by key over the defaults."""
        cfg = load_config(write_config(tmp_path, {"fit": {"min_rows": 10}, "seed": 4}))
        assert cfg["fit"]["min_rows"] == 10
        assert cfg["fit"]["lambda_points"] == DEFAULTS["fit"]["lambda_points"]
        assert cfg.seed == 4

    def test_env_path(self, tmp_path, monkeypatch):
        """AGWORK_CONFIG supplies the path when none is given."""
        monkeypatch.setenv(CONFIG_ENV, str(write_config(tmp_path, {"seed": 9})))
        assert load_config().seed == 9

    def test_unknown_key(self, tmp_path):
        """Misspelled keys are errors, not silently ignored."""
        with pytest.raises(ConfigError, match="fit.lamda_min"):
            load_config(write_config(tmp_path, {"fit": {"lamda_min": 1.0}}))

    def test_section_must_be_mapping(self, tmp_path):
        """A scalar in place of a section is rejected."""
        with pytest.raises(ConfigError, match="mapping"):
            load_config(write_config(tmp_path, {"fit": 3}))

    def test_invalid_yaml(self, tmp_path):
        """YAML syntax errors become config errors."""
        path = tmp_path / "bad.yaml"
        path.write_text("fit: [unclosed\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="invalid YAML"):
            load_config(path)

    @pytest.mark.parametrize("data", [
        {"seed": "random"},
        {"validation": {"seeds": []}},
        {"features": {"agland_mode": "both"}},
        {"deploy": {"formats": ["tif"]}},
        {"model": {"tensor_rank": [5]}},
        {"fit": {"patience": 0}},
    ])
    def test_invalid_values(self, tmp_path, data):
        """Values outside their domain are rejected at load time."""
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, data))

    def test_missing_file(self, tmp_path):
        """A missing config file is an OS error."""
        with pytest.raises(FileNotFoundError):
            load_config(tmp_path / "nope.yaml")

    def test_defaults_yaml_loads_back(self):
        """The printed defaults are valid YAML equal to DEFAULTS."""
        assert yaml.safe_load(defaults_yaml()) == DEFAULTS


class TestPaths:
    """Tests for path resolution."""

    def test_relative_to_config_dir(self, tmp_path):
        """Relative paths resolve against the config file's directory."""
        cfg = load_config(write_config(tmp_path, {"labels": "data/labels.csv"}))
        assert cfg.resolve(cfg["labels"]) == tmp_path.resolve() / "data" / "labels.csv"
        assert cfg.features_path == tmp_path.resolve() / "out" / "features.csv"
        assert cfg.model_path == tmp_path.resolve() / "out" / "model.arrow"

    def test_out_override(self, tmp_path):
        """--out is taken as given."""
        cfg = load_config(write_config(tmp_path, {}), {"out_dir": "elsewhere"})
        assert cfg.out_dir == Path("elsewhere")

    def test_layer_template(self, tmp_path):
        """Templates accept year, scenario and lower-case ssp."""
        cfg = load_config(write_config(tmp_path, {}))
        path = cfg.layer_path("ssp/{scenario}/{ssp}_{year}.gwg", 2050, "SSP3")
        assert path == tmp_path.resolve() / "ssp" / "SSP3" / "ssp3_2050.gwg"

    def test_layer_year_map(self, tmp_path):
        """A year -> path mapping picks the year's file."""
        cfg = load_config(write_config(tmp_path, {"features": {"gdp_pc": {2010: "g10.gwg", 2011: "g11.gwg"}}}))
        assert cfg.layer_path(cfg["features"]["gdp_pc"], 2011).name == "g11.gwg"
        with pytest.raises(ConfigError, match="2012"):
            cfg.layer_path(cfg["features"]["gdp_pc"], 2012)

    def test_bad_template(self, tmp_path):
        """Unknown template fields are reported."""
        cfg = load_config(write_config(tmp_path, {}))
        with pytest.raises(ConfigError, match="template"):
            cfg.layer_path("x_{decade}.gwg", 2010)

    def test_check_paths(self, tmp_path):
        """Missing paths become findings naming the input."""
        present = tmp_path / "here.csv"
        present.write_text("x\n", encoding="utf-8")
        findings = check_paths({"labels": present, "features": tmp_path / "gone.csv"})
        assert [(f.code, f.message.split(":")[0]) for f in findings] == [("MISSING_PATH", "features")]


class TestDerived:
    """Tests for derived settings."""

    def test_fit_config(self, tmp_path):
        """Fit settings map onto FitConfig."""
        cfg = load_config(write_config(tmp_path, {"fit": {"fixed_lambda": 10, "patience": 2}}), {"threads": 3})
        fc = cfg.fit_config()
        assert fc.fixed_lambda == 10.0
        assert fc.patience == 2
        assert fc.threads == 3

    def test_model_spec(self, tmp_path):
        """Model settings build the default spec for the structure."""
        cfg = load_config(write_config(tmp_path, {"model": {"structure": "smooths", "univariate_rank": 6}}))
        spec = cfg.model_spec()
        assert spec.structure == "smooths"
        assert {t.rank for t in spec.terms} == {(6,)}

    def test_deploy_grid(self, tmp_path):
        """The default deploy grid is the twelfth-degree land grid."""
        assert load_config(write_config(tmp_path, {})).deploy_grid().shape == (1680, 4320)

    def test_digest_ignores_threads(self, tmp_path):
        """Thread count does not change the config digest; seed does."""
        path = write_config(tmp_path, {})
        one = load_config(path, {"threads": 1}).sha256()
        assert load_config(path, {"threads": 8}).sha256() == one
        assert load_config(path, {"seed": 1}).sha256() != one


class TestThreads:
    """Tests for thread settings."""

    def test_env_threads(self, monkeypatch):
        """AGWORK_THREADS is read when it is an integer."""
        monkeypatch.setenv(THREADS_ENV, "4")
        assert env_threads() == 4
        monkeypatch.setenv(THREADS_ENV, "many")
        assert env_threads() is None

    def test_configure_threads_pins_pools(self, monkeypatch):
        """BLAS and OpenMP pools receive the same cap."""
        for var in THREAD_ENV_VARS:
            monkeypatch.delenv(var, raising=False)
        with threadpool_limits(limits=None):
            assert configure_threads(0) == 1
            assert configure_threads(2) == 2
        assert all(os.environ[var] == "2" for var in THREAD_ENV_VARS)

    def test_loaded_pools_limited(self, monkeypatch):
        """Pools created when numpy loaded are capped, not just the environment."""
        for var in THREAD_ENV_VARS:
            monkeypatch.delenv(var, raising=False)
        with threadpool_limits(limits=None):
            configure_threads(1)
            pools = threadpool_info()
            assert pools
            assert all(p["num_threads"] == 1 for p in pools), pools
