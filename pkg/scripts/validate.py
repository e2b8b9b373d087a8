#!/usr/bin/env python3
"""
Validation strategies for the EPWA model.

Strategies:
- spatial: within each subnational country, 80/20 split of units (all years of
  a unit move together), seeded and deterministic; national-only records train
- time_forward / time_backward: year-interval splits
- multiscale: a region's subnational records are swapped for its countries'
  national records on the train side and form the validation side

Each plan is checked (disjointness, coverage, interval membership, multiscale
set equations) and reported as Findings before any model is fitted.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
import structlog

if __package__:
    from .gamm import FitConfig, ModelData, ModelSpec, fit_data, predict_data, rmse
    from .ingest import LabelRecord, LabelSet, UnitFeatures, region_label
else:
    from gamm import FitConfig, ModelData, ModelSpec, fit_data, predict_data, rmse
    from ingest import LabelRecord, LabelSet, UnitFeatures, region_label

log = structlog.get_logger(__name__)

SPATIAL = "spatial"
TIME_FORWARD = "time_forward"
TIME_BACKWARD = "time_backward"
MULTISCALE = "multiscale"
STRATEGIES = (SPATIAL, TIME_FORWARD, TIME_BACKWARD, MULTISCALE)

# (train years, valid years), inclusive
TEMPORAL_WINDOWS = {
    "forward": ((2000, 2017), (2018, 2020)),
    "backward": ((2005, 2020), (2000, 2004)),
}

VALID_FRACTION = 0.2
MIN_SPLIT_UNITS = 5
ALL_REGIONS = "all"

REPORT_COLUMNS = ["strategy", "region", "rmse", "n_train", "n_valid"]
COUNTRY_COLUMNS = ["strategy", "region", "seed", "country_iso3", "n", "mean_residual", "rmse"]

Key = tuple[str, int]


@dataclass(frozen=True)
class Finding:
    """A validation finding (error or warning)."""
    level: str  # "ERROR" | "WARN"
    code: str
    message: str


class SplitEmptyError(ValueError):
    """Raised when a split leaves one side empty or has nothing to withhold."""


class PlanError(ValueError):
    """Raised when a split plan fails its integrity checks."""


@dataclass(frozen=True)
class SplitPlan:
    strategy: str
    train: tuple[Key, ...]
    valid: tuple[Key, ...]
    seed: Optional[int] = None
    region: Optional[str] = None
    flagged: tuple[str, ...] = ()
    withheld_countries: tuple[str, ...] = ()

    @property
    def label(self) -> str:
        return f"{self.strategy}:{self.region}" if self.region else self.strategy


def _sorted_keys(records: Iterable[LabelRecord]) -> tuple[Key, ...]:
    return tuple(sorted({r.key for r in records}))


def _require_sides(plan: SplitPlan) -> SplitPlan:
    if not plan.train or not plan.valid:
        raise SplitEmptyError(
            f"{plan.label}: empty side (train={len(plan.train)}, valid={len(plan.valid)})"
        )
    return plan


# =============================================================================
# Splits
# =============================================================================

def split_spatial(labels: LabelSet, seed: int) -> SplitPlan:
    """Per-country 80/20 unit split; valid count = max(1, round(0.2 * units))."""
    countries = labels.subnational_countries()
    if not countries:
        raise SplitEmptyError("spatial split needs at least one subnational country")

    rng = np.random.default_rng(seed)
    valid_units: set[str] = set()
    flagged: list[str] = []
    for country in countries:
        units = sorted({r.unit_id for r in labels.subnational_records() if r.country_iso3 == country})
        n = len(units)
        n_valid = max(1, math.floor(VALID_FRACTION * n + 0.5))
        if n < MIN_SPLIT_UNITS:
            flagged.append(country)
        for i in rng.permutation(n)[:n_valid]:
            valid_units.add(units[int(i)])

    train = [r for r in labels.records if r.unit_id not in valid_units]
    valid = [r for r in labels.records if r.unit_id in valid_units]
    if flagged:
        log.warning("spatial_small_countries", countries=flagged, min_units=MIN_SPLIT_UNITS)
    return _require_sides(SplitPlan(
        SPATIAL, _sorted_keys(train), _sorted_keys(valid), seed=seed, flagged=tuple(flagged),
    ))


def split_temporal(labels: LabelSet, direction: str) -> SplitPlan:
    if direction not in TEMPORAL_WINDOWS:
        raise ValueError(f"unknown temporal direction '{direction}' (use forward or backward)")
    (t_lo, t_hi), (v_lo, v_hi) = TEMPORAL_WINDOWS[direction]
    train = [r for r in labels.records if t_lo <= r.year <= t_hi]
    valid = [r for r in labels.records if v_lo <= r.year <= v_hi]
    strategy = TIME_FORWARD if direction == "forward" else TIME_BACKWARD
    return _require_sides(SplitPlan(strategy, _sorted_keys(train), _sorted_keys(valid)))


def _region_matches(code: str, region: str) -> bool:
    return code == region or region_label(code) == region_label(region)


def multiscale_countries(labels: LabelSet, region: str) -> list[str]:
    regions = labels.country_regions()
    return [c for c in labels.subnational_countries() if _region_matches(regions.get(c, ""), region)]


def split_multiscale(labels: LabelSet, region: str) -> SplitPlan:
    """Swap the region's subnational records for its countries' national records."""
    countries = set(multiscale_countries(labels, region))
    if not countries:
        raise SplitEmptyError(f"region '{region}' has no subnational country")

    train = [r for r in labels.records if not (r.admin_level >= 1 and r.country_iso3 in countries)]
    national = [r for r in labels.withheld_national if r.country_iso3 in countries]
    valid = [r for r in labels.records if r.admin_level >= 1 and r.country_iso3 in countries]
    if not national:
        log.warning("multiscale_no_national_records", region=region, countries=sorted(countries))
    return _require_sides(SplitPlan(
        MULTISCALE,
        _sorted_keys([*train, *national]),
        _sorted_keys(valid),
        region=region_label(region),
        withheld_countries=tuple(sorted(countries)),
    ))


def multiscale_regions(labels: LabelSet) -> list[str]:
    regions = labels.country_regions()
    return sorted({region_label(regions[c]) for c in labels.subnational_countries() if c in regions})


# =============================================================================
# Plan checks
# =============================================================================

def check_plan(plan: SplitPlan, labels: LabelSet) -> list[Finding]:
    findings: list[Finding] = []
    train, valid = set(plan.train), set(plan.valid)
    by_key = {r.key: r for r in (*labels.records, *labels.withheld_national)}

    if not train or not valid:
        findings.append(Finding("ERROR", "EMPTY_SIDE", f"{plan.label}: train={len(train)} valid={len(valid)}"))
    overlap = sorted(train & valid)
    if overlap:
        findings.append(Finding("ERROR", "OVERLAP", f"{plan.label}: {len(overlap)} records on both sides, e.g. {overlap[:3]}"))
    unknown = sorted((train | valid) - set(by_key))
    if unknown:
        findings.append(Finding("ERROR", "UNKNOWN_RECORD", f"{plan.label}: {len(unknown)} keys not in label set"))

    eligible = {r.key for r in labels.records}
    if plan.strategy == MULTISCALE:
        withheld = set(plan.withheld_countries)
        eligible |= {r.key for r in labels.withheld_national if r.country_iso3 in withheld}
    if train | valid != eligible:
        missing = len(eligible - (train | valid))
        extra = len((train | valid) - eligible)
        findings.append(Finding("ERROR", "COVERAGE", f"{plan.label}: {missing} eligible records missing, {extra} extra"))

    if plan.strategy in (TIME_FORWARD, TIME_BACKWARD):
        direction = "forward" if plan.strategy == TIME_FORWARD else "backward"
        (t_lo, t_hi), (v_lo, v_hi) = TEMPORAL_WINDOWS[direction]
        bad_train = [k for k in train if not t_lo <= k[1] <= t_hi]
        bad_valid = [k for k in valid if not v_lo <= k[1] <= v_hi]
        if bad_train or bad_valid:
            findings.append(Finding(
                "ERROR", "YEAR_INTERVAL",
                f"{plan.label}: {len(bad_train)} train and {len(bad_valid)} valid records outside their interval",
            ))

    if plan.strategy == SPATIAL:
        leaked = sorted({k[0] for k in train} & {k[0] for k in valid})
        if leaked:
            findings.append(Finding("ERROR", "UNIT_LEAK", f"{plan.label}: units on both sides: {leaked[:5]}"))
        for country in plan.flagged:
            findings.append(Finding("WARN", "SMALL_COUNTRY", f"{country}: fewer than {MIN_SPLIT_UNITS} subnational units"))

    if plan.strategy == MULTISCALE:
        withheld = set(plan.withheld_countries)
        sub_in_train = [
            k for k in train
            if k in by_key and by_key[k].admin_level >= 1 and by_key[k].country_iso3 in withheld
        ]
        if sub_in_train:
            findings.append(Finding("ERROR", "MULTISCALE_TRAIN", f"{plan.label}: {len(sub_in_train)} withheld subnational records in train"))
        expected_nat = {r.key for r in labels.withheld_national if r.country_iso3 in withheld}
        train_nat = {
            k for k in train
            if k in by_key and by_key[k].admin_level == 0 and by_key[k].country_iso3 in withheld
        }
        if train_nat != expected_nat:
            findings.append(Finding("ERROR", "MULTISCALE_NATIONAL", f"{plan.label}: national records of withheld countries do not match"))
        expected_valid = {r.key for r in labels.records if r.admin_level >= 1 and r.country_iso3 in withheld}
        if valid != expected_valid:
            findings.append(Finding("ERROR", "MULTISCALE_VALID", f"{plan.label}: valid side is not the withheld subnational set"))

    return findings


# =============================================================================
# Evaluation
# =============================================================================

@dataclass(frozen=True)
class CountryResidual:
    country_iso3: str
    n: int
    mean_residual: float
    rmse: float


@dataclass(frozen=True)
class ValidationReport:
    strategy: str
    region: Optional[str]
    seed: Optional[int]
    rmse: float
    n_train: int
    n_valid: int
    per_country: tuple[CountryResidual, ...] = ()
    fallback_counts: dict[str, int] = field(default_factory=dict, compare=False)


def _records_for(keys: Sequence[Key], labels: LabelSet) -> list[LabelRecord]:
    by_key = {r.key: r for r in (*labels.records, *labels.withheld_national)}
    return [by_key[k] for k in keys]


def _country_residuals(data: ModelData, mu: np.ndarray) -> tuple[CountryResidual, ...]:
    resid = data.y - mu
    out = []
    for country in sorted(set(data.countries.tolist())):
        mask = data.countries == country
        r = resid[mask]
        out.append(CountryResidual(country, int(r.size), float(r.mean()), math.sqrt(float(np.mean(r ** 2)))))
    return tuple(out)


def evaluate(
    spec: ModelSpec,
    plan: SplitPlan,
    labels: LabelSet,
    features: Iterable[UnitFeatures],
    config: Optional[FitConfig] = None,
) -> ValidationReport:
    """Fit on the train side, predict the valid side, report response-scale RMSE."""
    errors = [f for f in check_plan(plan, labels) if f.level == "ERROR"]
    if errors:
        raise PlanError("; ".join(f"[{f.code}] {f.message}" for f in errors))

    features = list(features)
    train = ModelData.from_labels(_records_for(plan.train, labels), features)
    valid = ModelData.from_labels(_records_for(plan.valid, labels), features)
    model = fit_data(spec, train, config)
    pred = predict_data(model, valid)

    report = ValidationReport(
        strategy=plan.strategy,
        region=plan.region,
        seed=plan.seed,
        rmse=rmse(valid.y, pred.mu),
        n_train=len(train),
        n_valid=len(valid),
        per_country=_country_residuals(valid, pred.mu),
        fallback_counts=pred.path_counts(),
    )
    log.info(
        "validation_evaluated",
        strategy=plan.strategy,
        region=plan.region,
        seed=plan.seed,
        rmse=report.rmse,
        n_train=report.n_train,
        n_valid=report.n_valid,
    )
    return report


def build_plans(
    labels: LabelSet,
    strategies: Sequence[str],
    seeds: Sequence[int] = (0,),
    regions: Sequence[str] = (ALL_REGIONS,),
) -> list[SplitPlan]:
    plans: list[SplitPlan] = []
    for strategy in strategies:
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown validation strategy '{strategy}'. Supported: {', '.join(STRATEGIES)}")
        if strategy == SPATIAL:
            plans.extend(split_spatial(labels, seed) for seed in seeds)
        elif strategy == TIME_FORWARD:
            plans.append(split_temporal(labels, "forward"))
        elif strategy == TIME_BACKWARD:
            plans.append(split_temporal(labels, "backward"))
        else:
            chosen = multiscale_regions(labels) if ALL_REGIONS in regions else list(regions)
            plans.extend(split_multiscale(labels, region) for region in chosen)
    return plans


def evaluate_all(
    spec: ModelSpec,
    plans: Sequence[SplitPlan],
    labels: LabelSet,
    features: Iterable[UnitFeatures],
    config: Optional[FitConfig] = None,
    threads: int = 1,
) -> list[ValidationReport]:
    """Evaluate plans on a bounded pool; results keep the order of ``plans``."""
    features = list(features)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(lambda plan: evaluate(spec, plan, labels, features, config), plans))


def report_frame(reports: Sequence[ValidationReport]) -> pd.DataFrame:
    rows = [
        [r.strategy, r.region or ALL_REGIONS, r.rmse, r.n_train, r.n_valid]
        for r in reports
    ]
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def country_frame(reports: Sequence[ValidationReport]) -> pd.DataFrame:
    rows = [
        [r.strategy, r.region or ALL_REGIONS, "" if r.seed is None else r.seed,
         c.country_iso3, c.n, c.mean_residual, c.rmse]
        for r in reports
        for c in r.per_country
    ]
    return pd.DataFrame(rows, columns=COUNTRY_COLUMNS)
