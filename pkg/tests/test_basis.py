"""
Unit tests for scripts/basis.py

Tests cover:
- Term specifications and labels
- Univariate, tensor, random-intercept and linear blocks
- Penalty symmetry and positive semi-definiteness
- Re-evaluation from stored state
"""

from pathlib import Path

import numpy as np
import pytest

import sys
sys.path.insert(0, str(Path(__file__).parent.parent / "scripts"))

from basis import (
    LINEAR,
    RANDOM_INTERCEPT,
    TENSOR2,
    UNIVARIATE,
    DegenerateGroupingError,
    RankError,
    SmoothSpec,
    build_block,
    build_linear,
    build_random_intercept,
    build_tensor2,
    build_univariate,
    is_psd,
    restore_block,
)


@pytest.fixture
def covariates():
    rng = np.random.default_rng(2)
    return {"a": rng.uniform(-2.0, 0.0, 300), "b": rng.uniform(6.0, 10.0, 300)}


class TestSmoothSpec:
    """Tests for term declarations."""

    def test_labels(self):
        """Labels follow s(), te() and re() notation."""
        assert SmoothSpec(UNIVARIATE, ("a",), (10,)).label == "s(a)"
        assert SmoothSpec(TENSOR2, ("a", "b"), (5, 5)).label == "te(a,b)"
        assert SmoothSpec(RANDOM_INTERCEPT, ("country",)).label == "re(country)"
        assert SmoothSpec(LINEAR, ("a",)).label == "a"

    def test_rank_too_small(self):
        """Univariate ranks start at three."""
        with pytest.raises(RankError):
            SmoothSpec(UNIVARIATE, ("a",), (2,))
        with pytest.raises(RankError):
            SmoothSpec(TENSOR2, ("a", "b"), (5, 2))

    def test_variable_count(self):
        """Each kind takes a fixed number of variables."""
        with pytest.raises(ValueError):
            SmoothSpec(TENSOR2, ("a",), (5, 5))

    def test_unknown_kind(self):
        """Only known kinds are accepted."""
        with pytest.raises(ValueError):
            SmoothSpec("spline3d", ("a",))


class TestUnivariate:
    """Tests for univariate smooths."""

    def test_shape_and_centering(self, covariates):
        """Rank k gives k-1 centred columns."""
        block = build_univariate(covariates["a"], rank=10, variable="a")
        assert block.design.shape == (300, 9)
        np.testing.assert_allclose(block.design.mean(axis=0), 0.0, atol=1e-10)

    def test_penalty_psd(self, covariates):
        """The penalty is symmetric PSD and leaves the linear column free."""
        block = build_univariate(covariates["a"], rank=8, variable="a")
        (penalty,) = block.penalties
        assert is_psd(penalty)
        assert np.all(penalty[-1, :] == 0.0)
        assert np.linalg.matrix_rank(penalty) == 8 - 2

    def test_evaluate_reproduces_design(self, covariates):
        """Re-evaluating the training data gives the training design."""
        block = build_univariate(covariates["a"], rank=6, variable="a")
        np.testing.assert_allclose(block.evaluate({"a": covariates["a"]}), block.design, atol=1e-10)

    def test_penalty_null_space_is_linear(self, covariates):
        """Only the linear direction is unpenalized once constants are absorbed."""
        block = build_univariate(covariates["a"], rank=10, variable="a")
        (penalty,) = block.penalties
        eig = np.linalg.eigvalsh(penalty)
        assert eig.min() >= -1e-10 * eig.max()
        assert int(np.sum(eig < 1e-10 * eig.max())) == 1
        linear = np.zeros(block.n_coef)
        linear[-1] = 1.0
        assert abs(linear @ penalty @ linear) < 1e-10

    def test_projects_sine(self):
        """A rank-20 basis reproduces sin on [0, pi] to within 1e-3."""
        x = np.linspace(0.0, np.pi, 500)
        block = build_univariate(x, rank=20, variable="x")
        design = np.column_stack([np.ones(x.size), block.design])
        coef, *_ = np.linalg.lstsq(design, np.sin(x), rcond=None)
        assert np.abs(design @ coef - np.sin(x)).max() < 1e-3

    def test_too_few_distinct_values(self):
        """Rank cannot exceed the number of distinct values."""
        with pytest.raises(RankError):
            build_univariate([1.0, 2.0, 3.0, 1.0, 2.0], rank=4)

    def test_non_finite(self):
        """Covariates must be finite."""
        with pytest.raises(RankError):
            build_univariate([1.0, 2.0, np.nan, 4.0], rank=3)


class TestTensor:
    """Tests for interaction-only tensor smooths."""

    def test_shape_and_penalties(self, covariates):
        """Two margins of rank 5 give 16 columns and two PSD penalties."""
        block = build_tensor2(covariates["a"], covariates["b"], (5, 5), ("a", "b"))
        assert block.design.shape == (300, 16)
        assert block.n_penalties == 2
        assert all(is_psd(p) for p in block.penalties)

    def test_orthogonal_to_main_effects(self, covariates):
        """The interaction carries nothing the main effects can represent."""
        block = build_tensor2(covariates["a"], covariates["b"], (4, 4), ("a", "b"))
        a = build_univariate(covariates["a"], 4, "a").design
        b = build_univariate(covariates["b"], 4, "b").design
        main = np.column_stack([np.ones(300), a, b])
        cross = main.T @ block.design
        assert np.abs(cross).max() < 1e-8 * max(1.0, np.abs(block.design).max() * 300)

    def test_evaluate_reproduces_design(self, covariates):
        """Stored projection and knots rebuild the training design."""
        block = build_tensor2(covariates["a"], covariates["b"], (4, 5), ("a", "b"))
        np.testing.assert_allclose(block.evaluate(covariates), block.design, atol=1e-8)

    def test_fits_product_surface(self):
        """Additive plus tensor blocks fit sin(x1)cos(x2) to RMSE below 1e-2."""
        rng = np.random.default_rng(5)
        x1 = rng.uniform(0.0, np.pi, 2000)
        x2 = rng.uniform(-np.pi / 2.0, np.pi / 2.0, 2000)
        target = np.sin(x1) * np.cos(x2)
        design = np.column_stack([
            np.ones(2000),
            build_univariate(x1, 10, "x1").design,
            build_univariate(x2, 10, "x2").design,
            build_tensor2(x1, x2, (10, 10), ("x1", "x2")).design,
        ])
        coef, *_ = np.linalg.lstsq(design, target, rcond=None)
        assert np.sqrt(np.mean((design @ coef - target) ** 2)) < 1e-2

    def test_main_effects_projected_out(self, covariates):
        """The tensor columns have no component in the span of the main effects."""
        block = build_tensor2(covariates["a"], covariates["b"], (5, 5), ("a", "b"))
        main = np.column_stack([
            np.ones(300),
            build_univariate(covariates["a"], 5, "a").design,
            build_univariate(covariates["b"], 5, "b").design,
        ])
        q, _ = np.linalg.qr(main)
        assert np.linalg.norm(q.T @ block.design) < 5e-10 * np.linalg.norm(block.design)

    def test_length_mismatch(self):
        """Margins must align row for row."""
        with pytest.raises(RankError):
            build_tensor2(np.arange(10.0), np.arange(9.0))


class TestRandomIntercept:
    """Tests for grouped random intercepts."""

    def test_indicator_design(self):
        """Levels are sorted and each row has one indicator."""
        block = build_random_intercept(["KEN", "BRA", "KEN", "ARG"], "country")
        assert block.levels == ("ARG", "BRA", "KEN")
        assert block.design.sum(axis=1).tolist() == [1.0, 1.0, 1.0, 1.0]
        assert block.design[0].tolist() == [0.0, 0.0, 1.0]
        np.testing.assert_array_equal(block.penalties[0], np.eye(3))

    def test_unseen_level_is_zero_row(self):
        """New groups evaluate to the population level."""
        block = build_random_intercept(["A", "B"], "country")
        assert block.evaluate({"country": ["C", "B"]}).tolist() == [[0.0, 0.0], [0.0, 1.0]]
        assert block.level_index(["B", "C"]).tolist() == [1, -1]

    def test_large_penalty_shrinks_to_zero(self):
        """Ridge-fitted intercepts vanish as the smoothing parameter grows."""
        rng = np.random.default_rng(8)
        groups = np.repeat(["A", "B", "C", "D"], 50)
        offsets = np.repeat([-0.6, -0.2, 0.3, 0.5], 50)
        y = 1.0 + offsets + rng.normal(0.0, 0.1, 200)
        block = build_random_intercept(groups, "country")
        X = np.column_stack([np.ones(200), block.design])

        def intercepts(lam):
            S = np.zeros((5, 5))
            S[1:, 1:] = lam * block.penalties[0]
            return np.linalg.solve(X.T @ X + S, X.T @ y)[1:]

        free = intercepts(1e-6)
        assert np.corrcoef(free, [-0.6, -0.2, 0.3, 0.5])[0, 1] > 0.99
        sizes = [np.abs(intercepts(lam)).max() for lam in (1.0, 1e2, 1e4, 1e8)]
        assert all(a > b for a, b in zip(sizes, sizes[1:]))
        assert sizes[-1] < 1e-5

    def test_single_level(self):
        """One level cannot carry a random effect."""
        with pytest.raises(DegenerateGroupingError):
            build_random_intercept(["A", "A", "A"], "country")


class TestBlockDispatch:
    """Tests for spec-driven construction and restoration."""

    def test_build_block_matches_builders(self, covariates):
        """build_block routes each kind to its builder."""
        spec = SmoothSpec(UNIVARIATE, ("a",), (5,))
        np.testing.assert_array_equal(
            build_block(spec, covariates).design, build_univariate(covariates["a"], 5, "a").design
        )
        assert build_block(SmoothSpec(LINEAR, ("b",)), covariates).n_coef == 1

    def test_linear_is_centered(self, covariates):
        """Linear terms are centred and unpenalized."""
        block = build_linear(covariates["b"], "b")
        assert block.penalties == ()
        assert abs(block.design.mean()) < 1e-12

    def test_restore_evaluates_like_original(self, covariates):
        """A restored block predicts like the block it came from."""
        block = build_tensor2(covariates["a"], covariates["b"], (4, 4), ("a", "b"))
        restored = restore_block(block.spec, block.state, block.penalties, block.penalty_scales,
                                 n_coef=block.n_coef)
        new = {"a": np.array([-1.5, -0.2]), "b": np.array([7.0, 9.5])}
        np.testing.assert_array_equal(restored.evaluate(new), block.evaluate(new))
        assert restored.design.shape == (0, 9)

    def test_construction_is_bitwise_deterministic(self, covariates):
        """Building a block twice gives byte-identical designs, penalties and state."""
        groups = np.where(covariates["a"] < -1.0, "LOW", "HIGH")
        builders = (
            lambda: build_univariate(covariates["a"], 10, "a"),
            lambda: build_tensor2(covariates["a"], covariates["b"], (5, 5), ("a", "b")),
            lambda: build_random_intercept(groups, "country"),
            lambda: build_linear(covariates["b"], "b"),
        )
        for build in builders:
            first, second = build(), build()
            assert first.design.tobytes() == second.design.tobytes()
            assert [p.tobytes() for p in first.penalties] == [p.tobytes() for p in second.penalties]
            assert first.penalty_scales == second.penalty_scales
            assert {k: v.tobytes() for k, v in first.state.items()} == {k: v.tobytes() for k, v in second.state.items()}
            assert first.levels == second.levels

    def test_is_psd_rejects_asymmetric(self):
        """Asymmetric or indefinite matrices are not PSD."""
        assert not is_psd(np.array([[1.0, 2.0], [0.0, 1.0]]))
        assert not is_psd(np.array([[1.0, 0.0], [0.0, -1.0]]))
        assert is_psd(np.zeros((2, 2)))
