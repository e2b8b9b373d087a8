"""
Unit tests for scripts/validate.py

Tests cover:
- Spatial, temporal and multiscale split algebra
- Plan integrity findings
- Fitting and scoring plans on synthetic data
- Report frames
"""

from pathlib import Path

import pytest

import sys
sys.path.insert(0, str(Path(__file__).parent.parent / "scripts"))

from gamm import FitConfig, ModelSpec
from ingest import LabelRecord, merge_labels
from validate import (
    COUNTRY_COLUMNS,
    MULTISCALE,
    REPORT_COLUMNS,
    SPATIAL,
    TIME_BACKWARD,
    TIME_FORWARD,
    PlanError,
    SplitEmptyError,
    SplitPlan,
    build_plans,
    check_plan,
    country_frame,
    evaluate,
    evaluate_all,
    multiscale_countries,
    multiscale_regions,
    report_frame,
    split_multiscale,
    split_spatial,
    split_temporal,
)
from tests.conftest import corpus_labels

FAST = FitConfig(lambda_points=4, sweeps=1)


def errors(findings):
    return [f for f in findings if f.level == "ERROR"]


class TestSpatialSplit:
    """Tests for the per-country unit split."""

    def test_ten_units_split_eight_two(self):
        """A country with ten units withholds two."""
        records = [LabelRecord(f"AAA-{u}", "AAA", "SA", 1, 2010, 0.3) for u in range(10)]
        plan = split_spatial(merge_labels([], records), seed=0)
        assert len(plan.train) == 8 and len(plan.valid) == 2

    def test_one_unit_per_corpus_country(self, corpus):
        """Six units per country give one validation unit each."""
        plan = split_spatial(corpus, seed=0)
        valid_units = {k[0] for k in plan.valid}
        assert len(valid_units) == len(corpus.subnational_countries())
        assert len(plan.valid) == len(valid_units) * 21

    def test_national_records_stay_in_train(self, corpus):
        """National-only countries are never withheld."""
        plan = split_spatial(corpus, seed=3)
        national = {r.key for r in corpus.national_records()}
        assert national <= set(plan.train)

    def test_plan_is_clean(self, corpus):
        """Spatial plans pass every integrity check."""
        assert errors(check_plan(split_spatial(corpus, seed=1), corpus)) == []

    def test_seeded_and_reproducible(self, corpus):
        """The same seed gives the same plan; other seeds differ."""
        assert split_spatial(corpus, seed=5) == split_spatial(corpus, seed=5)
        assert split_spatial(corpus, seed=5).valid != split_spatial(corpus, seed=6).valid

    def test_small_countries_flagged(self):
        """Countries under five units are flagged with a warning."""
        labels = corpus_labels(n_countries=3, n_subnational=2, units_per_country=3, years=(2010,))
        plan = split_spatial(labels, seed=0)
        assert plan.flagged == ("C00", "C01")
        codes = [(f.level, f.code) for f in check_plan(plan, labels)]
        assert codes == [("WARN", "SMALL_COUNTRY"), ("WARN", "SMALL_COUNTRY")]

    def test_needs_subnational_data(self):
        """National-only label sets cannot be split spatially."""
        labels = merge_labels([LabelRecord("AAA", "AAA", "SA", 0, 2010, 0.3)], [])
        with pytest.raises(SplitEmptyError):
            split_spatial(labels, seed=0)


class TestTemporalSplit:
    """Tests for forward and backward year splits."""

    def test_forward_counts(self, corpus):
        """2000-2017 train, 2018-2020 valid."""
        plan = split_temporal(corpus, "forward")
        assert plan.strategy == TIME_FORWARD
        assert (len(plan.train), len(plan.valid)) == (1440, 240)
        assert {k[1] for k in plan.valid} == {2018, 2019, 2020}

    def test_backward_counts(self, corpus):
        """2005-2020 train, 2000-2004 valid."""
        plan = split_temporal(corpus, "backward")
        assert plan.strategy == TIME_BACKWARD
        assert (len(plan.train), len(plan.valid)) == (1280, 400)
        assert max(k[1] for k in plan.valid) == 2004

    def test_plans_are_clean(self, corpus):
        """Both directions cover the corpus without overlap."""
        for direction in ("forward", "backward"):
            assert errors(check_plan(split_temporal(corpus, direction), corpus)) == []

    def test_empty_side(self):
        """A corpus with only early years leaves forward validation empty."""
        labels = merge_labels([LabelRecord("AAA", "AAA", "SA", 0, 2001, 0.3)], [])
        with pytest.raises(SplitEmptyError):
            split_temporal(labels, "forward")

    def test_unknown_direction(self, corpus):
        """Only forward and backward exist."""
        with pytest.raises(ValueError):
            split_temporal(corpus, "sideways")


class TestMultiscaleSplit:
    """Tests for the national-to-subnational split."""

    def test_region_membership(self, corpus):
        """Subnational countries are grouped by region."""
        assert multiscale_regions(corpus) == ["EAF", "SA", "WE"]
        assert multiscale_countries(corpus, "SA") == ["C00", "C03", "C06"]

    def test_swaps_levels(self, corpus):
        """Withheld countries train on national records and validate on subnational ones."""
        plan = split_multiscale(corpus, "SA")
        assert plan.strategy == MULTISCALE
        assert plan.withheld_countries == ("C00", "C03", "C06")
        assert len(plan.valid) == 3 * 6 * 21
        assert len(plan.train) == 1680 - 378 + 3 * 21
        assert ("C00", 2010) in set(plan.train)
        assert all(k[0].startswith(("C00-", "C03-", "C06-")) for k in plan.valid)

    def test_plan_is_clean(self, corpus):
        """Multiscale plans pass every integrity check."""
        for region in multiscale_regions(corpus):
            assert errors(check_plan(split_multiscale(corpus, region), corpus)) == []

    def test_region_by_name(self, corpus):
        """Regions may be named by M49 code or full name."""
        assert split_multiscale(corpus, "005") == split_multiscale(corpus, "South America")

    def test_region_without_subnational(self, corpus):
        """Regions without subnational countries cannot be withheld."""
        with pytest.raises(SplitEmptyError):
            split_multiscale(corpus, "POL")


class TestCheckPlan:
    """Tests for plan integrity findings."""

    def test_overlap_detected(self, corpus):
        """A record on both sides is an error."""
        plan = split_temporal(corpus, "forward")
        broken = SplitPlan(plan.strategy, plan.train + plan.valid[:1], plan.valid)
        codes = {f.code for f in errors(check_plan(broken, corpus))}
        assert "OVERLAP" in codes
        assert "YEAR_INTERVAL" in codes

    def test_missing_records(self, corpus):
        """Dropping records breaks coverage."""
        plan = split_temporal(corpus, "forward")
        broken = SplitPlan(plan.strategy, plan.train[1:], plan.valid)
        assert [f.code for f in errors(check_plan(broken, corpus))] == ["COVERAGE"]

    def test_unit_leak(self, corpus):
        """A unit may not appear on both sides of a spatial plan."""
        plan = split_spatial(corpus, seed=0)
        unit = plan.valid[0][0]
        moved = tuple(k for k in plan.valid if k[0] == unit)[:1]
        broken = SplitPlan(SPATIAL, tuple(sorted(plan.train + moved)),
                           tuple(k for k in plan.valid if k not in moved))
        assert "UNIT_LEAK" in {f.code for f in errors(check_plan(broken, corpus))}

    def test_unknown_strategy(self, corpus):
        """build_plans rejects unknown strategy names."""
        with pytest.raises(ValueError, match="unknown validation strategy"):
            build_plans(corpus, ["holdout"])

    def test_build_plans_expands(self, corpus):
        """One spatial plan per seed and one multiscale plan per region."""
        plans = build_plans(corpus, [SPATIAL, TIME_FORWARD, MULTISCALE], seeds=[0, 1])
        assert [p.label for p in plans] == [
            "spatial", "spatial", "time_forward", "multiscale:EAF", "multiscale:SA", "multiscale:WE",
        ]
        assert [p.seed for p in plans[:2]] == [0, 1]


class TestEvaluate:
    """Tests for fitting and scoring plans."""

    def test_spatial_report(self, model_rows):
        """Reports carry sizes, RMSE and per-country residuals."""
        labels, features, _ = model_rows
        plan = split_spatial(labels, seed=0)
        report = evaluate(ModelSpec.default("linear"), plan, labels, features, FAST)
        assert (report.n_train, report.n_valid) == (96 * 5, 24 * 5)
        assert 0.0 < report.rmse < 0.5
        assert [c.country_iso3 for c in report.per_country] == [f"K{c:02d}" for c in range(6)]

    def test_bad_plan_refused(self, model_rows):
        """Plans with integrity errors are not evaluated."""
        labels, features, _ = model_rows
        plan = split_spatial(labels, seed=0)
        broken = SplitPlan(SPATIAL, plan.train + plan.valid[:1], plan.valid, seed=0)
        with pytest.raises(PlanError, match="OVERLAP"):
            evaluate(ModelSpec.default("linear"), broken, labels, features, FAST)

    def test_evaluate_all_keeps_order(self, model_rows):
        """Threaded evaluation returns reports in plan order."""
        labels, features, _ = model_rows
        plans = build_plans(labels, [TIME_FORWARD, SPATIAL, TIME_BACKWARD], seeds=[2])
        reports = evaluate_all(ModelSpec.default("linear"), plans, labels, features, FAST, threads=2)
        assert [r.strategy for r in reports] == [TIME_FORWARD, SPATIAL, TIME_BACKWARD]
        serial = evaluate_all(ModelSpec.default("linear"), plans, labels, features, FAST, threads=1)
        assert [r.rmse for r in reports] == [r.rmse for r in serial]

    def test_frames(self, model_rows):
        """Report frames use fixed columns."""
        labels, features, _ = model_rows
        reports = evaluate_all(ModelSpec.default("linear"), [split_temporal(labels, "forward")],
                               labels, features, FAST)
        frame = report_frame(reports)
        assert list(frame.columns) == REPORT_COLUMNS
        assert frame.loc[0, "region"] == "all"
        assert list(country_frame(reports).columns) == COUNTRY_COLUMNS
