"""
Pytest fixtures for agworkforce tests.
"""

import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Add scripts to path
sys.path.insert(0, str(Path(__file__).parent.parent / "scripts"))

from ingest import LabelRecord, UnitFeatures, merge_labels
from raster import GridSpec, Raster, ZoneMap, ZoneUnit


def pytest_configure(config):
    """Register custom markers."""
    config.addinivalue_line(
        "markers", "slow: marks synthetic model fits (skip with AGWORK_SLOW_SKIP=1)"
    )


def pytest_collection_modifyitems(config, items):
    """Skip slow fits if AGWORK_SLOW_SKIP is set."""
    if os.environ.get("AGWORK_SLOW_SKIP"):
        skip_slow = pytest.mark.skip(reason="AGWORK_SLOW_SKIP is set")
        for item in items:
            if "slow" in item.keywords:
                item.add_marker(skip_slow)


# =============================================================================
# Grids
# =============================================================================

@pytest.fixture
def small_grid() -> GridSpec:
    """4 x 8 grid of half-degree cells."""
    return GridSpec.from_extent(0.0, 4.0, 0.0, 2.0, 0.5)


@pytest.fixture
def two_zone_map(small_grid: GridSpec) -> ZoneMap:
    """Left half is unit A1 (country AAA), right half is unit B1 (country BBB)."""
    ids = np.zeros(small_grid.shape, dtype=np.int64)
    ids[:, 4:] = 1
    legend = {
        0: ZoneUnit("A1", "AAA", "SA"),
        1: ZoneUnit("B1", "BBB", "WE"),
    }
    return ZoneMap(small_grid, ids, legend)


def constant_raster(spec: GridSpec, value: float, variable_id: str = "value", year: int = 0) -> Raster:
    return Raster(spec, np.full(spec.shape, value), variable_id, year)


# =============================================================================
# Synthetic label corpora
# =============================================================================

REGIONS = ("SA", "WE", "EAF")


def corpus_labels(
    n_countries: int = 40,
    n_subnational: int = 8,
    units_per_country: int = 6,
    years: tuple[int, ...] = tuple(range(2000, 2021)),
):
    """Deterministic label set: national records for every country, subnational for the first few."""
    rng = np.random.default_rng(7)
    national, subnational = [], []
    for c in range(n_countries):
        iso = f"C{c:02d}"
        region = REGIONS[c % len(REGIONS)]
        for year in years:
            national.append(LabelRecord(iso, iso, region, 0, year, float(rng.uniform(0.05, 0.6))))
            if c < n_subnational:
                for u in range(units_per_country):
                    subnational.append(
                        LabelRecord(f"{iso}-{u}", iso, region, 1, year, float(rng.uniform(0.05, 0.6)))
                    )
    return merge_labels(national, subnational)


def true_eta(x: dict) -> np.ndarray:
    return (
        -1.0
        + 0.8 * np.sin(x["ln_rural_prop"] * 2.0)
        - 0.5 * x["ln_pop_density"]
        + 0.3 * (x["ln_gdp_median"] - 8.0) ** 2 / 4.0
        + 0.4 * x["ln_agland"]
    )


def synthetic_model_rows(
    n_countries: int = 6,
    units_per_country: int = 20,
    years: tuple[int, ...] = (2000, 2005, 2010, 2015, 2020),
    phi: float = 50.0,
    offsets: tuple[float, ...] = (),
    seed: int = 11,
    interaction: float = 0.0,
):
    """Labels and features drawn from a known Beta model.

    Returns (labels, features, truth) where truth maps (unit_id, year) to the true mean.
    """
    rng = np.random.default_rng(seed)
    offsets = offsets or tuple(np.linspace(-0.6, 0.6, n_countries))
    records, features, truth = [], [], {}
    for c in range(n_countries):
        iso = f"K{c:02d}"
        region = REGIONS[c % len(REGIONS)]
        for u in range(units_per_country):
            uid = f"{iso}-{u:03d}"
            for year in years:
                x = {
                    "ln_rural_prop": float(rng.uniform(-2.0, 0.0)),
                    "ln_pop_density": float(rng.uniform(0.0, 4.0)),
                    "ln_gdp_median": float(rng.uniform(6.0, 10.0)),
                    "ln_agland": float(rng.uniform(-3.0, 0.0)),
                }
                eta = float(true_eta(x)) + offsets[c]
                eta += interaction * (x["ln_gdp_median"] - 8.0) * (x["ln_rural_prop"] + 1.0)
                mu = 1.0 / (1.0 + np.exp(-eta))
                y = float(rng.beta(mu * phi, (1.0 - mu) * phi))
                records.append(LabelRecord(uid, iso, region, 1, year, y))
                features.append(UnitFeatures(uid, iso, region, year, **x))
                truth[(uid, year)] = mu
    return merge_labels([], records), features, truth


@pytest.fixture
def corpus():
    """40 countries over 21 years, 8 with subnational units."""
    return corpus_labels()


@pytest.fixture(scope="session")
def model_rows():
    """Small synthetic corpus for fitting tests."""
    return synthetic_model_rows()
