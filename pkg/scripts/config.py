#!/usr/bin/env python3
"""
Run configuration for agworkforce commands.

A run config is a nested YAML document merged over DEFAULTS. Relative paths
resolve against the config file's directory. Paths may be templates with
``{year}`` and ``{scenario}`` placeholders, or mappings from year to path.

Environment:
- AGWORK_CONFIG: default config path
- AGWORK_THREADS: worker cap when --threads is not given
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import yaml
from threadpoolctl import threadpool_limits

if __package__:
    from .gamm import FitConfig, ModelSpec
    from .raster import GridSpec
    from .validate import Finding
else:
    from gamm import FitConfig, ModelSpec
    from raster import GridSpec
    from validate import Finding

PathLike = Union[str, Path]

CONFIG_ENV = "AGWORK_CONFIG"
THREADS_ENV = "AGWORK_THREADS"

THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "threads": 1,
    "out_dir": "out",
    "labels": "labels.csv",
    "features_csv": None,
    "features": {
        "anchor_years": [2000, 2010, 2020],
        "years": None,
        "rural": "rasters/rural_{year}.gwg",
        "total": "rasters/total_{year}.gwg",
        "gdp_pc": "rasters/gdp_pc_{year}.gwg",
        "cropland": "rasters/cropland.gwg",
        "pasture": "rasters/pasture.gwg",
        "zones": {"grid": "zones/units.gwg", "legend": "zones/units.csv"},
        "agland_mode": "combined",
    },
    "model": {
        "structure": "smooths+RE+interactions",
        "grouping": "country",
        "univariate_rank": 10,
        "tensor_rank": [5, 5],
        "compare_structures": False,
        "partial_effects": None,
        "histogram_bins": 40,
    },
    "fit": {
        "lambda_min": 1e-4,
        "lambda_max": 1e6,
        "lambda_points": 11,
        "sweeps": 2,
        "patience": 3,
        "fixed_lambda": None,
        "tol": 1e-8,
        "max_iter": 200,
        "max_halvings": 10,
        "phi_tol": 1e-6,
        "region_model": True,
        "min_rows": 50,
    },
    "validation": {
        "strategies": ["spatial", "time_forward", "time_backward", "multiscale"],
        "seeds": [0],
        "regions": ["all"],
    },
    "deploy": {
        "model": None,
        "scenarios": ["SSP1", "SSP2", "SSP3", "SSP4", "SSP5"],
        "years": list(range(2000, 2101, 10)),
        "grid": {"lon_min": -180.0, "lon_max": 180.0, "lat_min": -56.0, "lat_max": 84.0, "cell_size": 1.0 / 12.0},
        "rural": "ssp/{scenario}/rural_{year}.gwg",
        "total": "ssp/{scenario}/total_{year}.gwg",
        "gdp_pc": "ssp/{scenario}/gdp_pc_{year}.gwg",
        "cropland": "rasters/cropland.gwg",
        "pasture": "rasters/pasture.gwg",
        "admin2": {"grid": "zones/admin2.gwg", "legend": "zones/admin2.csv"},
        "mask": None,
        "employable": None,
        "reference": None,
        "carry_forward": False,
        "formats": ["gwg"],
        "baseline_year": 2020,
        "top_n": 10,
    },
}


class ConfigError(ValueError):
    """Raised when a run config is malformed."""


def _merge(base: dict[str, Any], override: Mapping[str, Any], where: str = "") -> dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key '{where}{key}'")
        if isinstance(base[key], dict) and base[key] and not _is_year_map(base[key]):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key '{where}{key}' must be a mapping")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _is_year_map(value: Any) -> bool:
    return isinstance(value, Mapping) and bool(value) and all(isinstance(k, int) for k in value)


@dataclass(frozen=True)
class RunConfig:
    data: dict[str, Any]
    base_dir: Path
    source: Optional[Path] = None
    overrides: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        return self.data[key]

    def section(self, name: str) -> dict[str, Any]:
        return self.data[name]

    @property
    def seed(self) -> int:
        return int(self.overrides.get("seed", self.data["seed"]))

    @property
    def threads(self) -> int:
        return max(1, int(self.overrides.get("threads", self.data["threads"])))

    @property
    def out_dir(self) -> Path:
        if "out_dir" in self.overrides:
            return Path(self.overrides["out_dir"])
        return self.resolve(self.data["out_dir"])

    @property
    def features_path(self) -> Path:
        value = self.data["features_csv"]
        return self.out_dir / "features.csv" if value is None else self.resolve(value)

    @property
    def model_path(self) -> Path:
        value = self.data["deploy"]["model"]
        return self.out_dir / "model.arrow" if value is None else self.resolve(value)

    def resolve(self, value: PathLike) -> Path:
        path = Path(value)
        return path if path.is_absolute() else self.base_dir / path

    def layer_path(self, value: Any, year: Optional[int] = None, scenario: Optional[str] = None) -> Path:
        """Resolve a path template or a year -> path mapping."""
        if isinstance(value, Mapping):
            if year not in value:
                raise ConfigError(f"no path configured for year {year}")
            return self.resolve(value[year])
        if not isinstance(value, str):
            raise ConfigError(f"expected a path, got {value!r}")
        fields = {"year": year, "scenario": scenario, "ssp": (scenario or "").lower()}
        try:
            return self.resolve(value.format(**fields))
        except (KeyError, IndexError) as exc:
            raise ConfigError(f"bad path template '{value}'") from exc

    def canonical(self) -> dict[str, Any]:
        """Effective settings (config merged with command-line overrides)."""
        merged = copy.deepcopy(self.data)
        merged["seed"] = self.seed
        merged["threads"] = self.threads
        return merged

    def sha256(self) -> str:
        """Digest of the settings that affect results (thread count excluded)."""
        settings = self.canonical()
        del settings["threads"]
        payload = json.dumps(settings, sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def fit_config(self) -> FitConfig:
        f = self.data["fit"]
        fixed = f["fixed_lambda"]
        return FitConfig(
            lambda_min=float(f["lambda_min"]),
            lambda_max=float(f["lambda_max"]),
            lambda_points=int(f["lambda_points"]),
            sweeps=int(f["sweeps"]),
            patience=int(f["patience"]),
            fixed_lambda=None if fixed is None else float(fixed),
            tol=float(f["tol"]),
            max_iter=int(f["max_iter"]),
            max_halvings=int(f["max_halvings"]),
            phi_tol=float(f["phi_tol"]),
            region_model=bool(f["region_model"]),
            min_rows=int(f["min_rows"]),
            threads=self.threads,
        )

    def model_spec(self, structure: Optional[str] = None) -> ModelSpec:
        m = self.data["model"]
        return ModelSpec.default(
            structure or m["structure"],
            m["grouping"],
            self.data["features"]["agland_mode"],
            int(m["univariate_rank"]),
            (int(m["tensor_rank"][0]), int(m["tensor_rank"][1])),
        )

    def deploy_grid(self) -> GridSpec:
        g = self.data["deploy"]["grid"]
        return GridSpec.from_extent(g["lon_min"], g["lon_max"], g["lat_min"], g["lat_max"], g["cell_size"])


def _validate(data: dict[str, Any]) -> None:
    if not isinstance(data["seed"], int) or isinstance(data["seed"], bool):
        raise ConfigError(f"seed must be an explicit integer, got {data['seed']!r}")
    seeds = data["validation"]["seeds"]
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("validation.seeds must be a non-empty list of integers")
    if data["features"]["agland_mode"] not in ("combined", "split"):
        raise ConfigError("features.agland_mode must be 'combined' or 'split'")
    if not isinstance(data["deploy"]["formats"], list) or not set(data["deploy"]["formats"]) <= {"gwg", "asc"}:
        raise ConfigError("deploy.formats must be a list drawn from ['gwg', 'asc']")
    patience = data["fit"]["patience"]
    if not isinstance(patience, int) or isinstance(patience, bool) or patience < 1:
        raise ConfigError(f"fit.patience must be a positive integer, got {patience!r}")
    rank = data["model"]["tensor_rank"]
    if not (isinstance(rank, list) and len(rank) == 2):
        raise ConfigError("model.tensor_rank must be a two-element list")


def load_config(
    path: Optional[PathLike] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Load ``path`` (or AGWORK_CONFIG) over DEFAULTS; no path means defaults rooted at cwd."""
    if path is None and os.getenv(CONFIG_ENV):
        path = os.environ[CONFIG_ENV]
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}

    if path is None:
        data = copy.deepcopy(DEFAULTS)
        base_dir, source = Path.cwd(), None
    else:
        source = Path(path)
        with source.open("r", encoding="utf-8") as fh:
            try:
                raw = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"{source}: invalid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{source}: top level must be a mapping")
        data = _merge(DEFAULTS, raw)
        base_dir = source.resolve().parent

    _validate(data)
    return RunConfig(data=data, base_dir=base_dir, source=source, overrides=dict(overrides))


def defaults_yaml() -> str:
    return yaml.safe_dump(DEFAULTS, sort_keys=False, default_flow_style=False)


def check_paths(paths: Mapping[str, Path]) -> list[Finding]:
    return [
        Finding("ERROR", "MISSING_PATH", f"{name}: {path}")
        for name, path in paths.items()
        if not path.exists()
    ]


def env_threads() -> Optional[int]:
    env = os.getenv(THREADS_ENV)
    if not env:
        return None
    try:
        return int(env)
    except ValueError:
        return None


def configure_threads(threads: Optional[int] = None) -> int:
    """Cap BLAS/OpenMP pools at ``threads`` (or AGWORK_THREADS); returns the count used.

    Pools already loaded are limited in place; the environment variables
    cover libraries loaded later and child processes.
    """
    if threads is None:
        threads = env_threads() or 1
    threads = max(1, threads)
    for var in THREAD_ENV_VARS:
        os.environ[var] = str(threads)
    threadpool_limits(limits=threads)
    return threads
