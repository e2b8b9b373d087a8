#!/usr/bin/env python3
"""
Penalized smooth bases for the Beta GAMM.

Block kinds:
- univariate: low-rank cubic thin-plate-style basis (|x - knot|^3 / 12 radial
  parts on quantile knots plus a linear term), constants absorbed by centering
- tensor2: row-wise product of two centered marginal bases, with the additive
  main-effect directions projected out so the block carries interaction only
- random_intercept: one indicator column per level, identity (ridge) penalty
- linear: centered identity columns, unpenalized

Every block keeps enough state to re-evaluate at new covariate values, and
re-evaluating at the training covariates reproduces the training design.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

import numpy as np
import scipy.linalg as la

UNIVARIATE = "univariate"
TENSOR2 = "tensor2"
RANDOM_INTERCEPT = "random_intercept"
LINEAR = "linear"
SMOOTH_KINDS = (UNIVARIATE, TENSOR2, RANDOM_INTERCEPT, LINEAR)

MIN_UNIVARIATE_RANK = 3
PSD_TOLERANCE = 1e-10


class RankError(ValueError):
    """Raised when a covariate has too few distinct values for the requested rank."""


class DegenerateGroupingError(ValueError):
    """Raised when a grouping factor has fewer than two levels."""


@dataclass(frozen=True)
class SmoothSpec:
    """Declarative description of one model term."""

    kind: str
    variables: tuple[str, ...]
    rank: tuple[int, ...] = ()
    penalty_order: int = 2

    def __post_init__(self) -> None:
        if self.kind not in SMOOTH_KINDS:
            raise ValueError(f"unknown smooth kind '{self.kind}'")
        expected_vars = {UNIVARIATE: 1, TENSOR2: 2, RANDOM_INTERCEPT: 1, LINEAR: 1}[self.kind]
        if len(self.variables) != expected_vars:
            raise ValueError(f"{self.kind} takes {expected_vars} variable(s), got {self.variables}")
        if self.kind == UNIVARIATE and (len(self.rank) != 1 or self.rank[0] < MIN_UNIVARIATE_RANK):
            raise RankError(f"univariate rank must be >= {MIN_UNIVARIATE_RANK}, got {self.rank}")
        if self.kind == TENSOR2 and (len(self.rank) != 2 or min(self.rank) < MIN_UNIVARIATE_RANK):
            raise RankError(f"tensor2 needs two marginal ranks >= {MIN_UNIVARIATE_RANK}, got {self.rank}")
        if self.penalty_order != 2:
            raise ValueError("only second-order penalties are supported")

    @property
    def label(self) -> str:
        if self.kind == TENSOR2:
            return f"te({self.variables[0]},{self.variables[1]})"
        if self.kind == RANDOM_INTERCEPT:
            return f"re({self.variables[0]})"
        if self.kind == LINEAR:
            return self.variables[0]
        return f"s({self.variables[0]})"


@dataclass(frozen=True, eq=False)
class BasisBlock:
    """An evaluated term: training design, penalty components and re-evaluation state."""

    spec: SmoothSpec
    design: np.ndarray
    penalties: tuple[np.ndarray, ...]
    penalty_scales: tuple[float, ...]
    state: Mapping[str, np.ndarray] = field(default_factory=dict)
    levels: tuple[str, ...] = ()

    @property
    def n_coef(self) -> int:
        return self.design.shape[1]

    @property
    def n_penalties(self) -> int:
        return len(self.penalties)

    def evaluate(self, data: Mapping[str, Any]) -> np.ndarray:
        """Design rows for new covariate values (unknown random-effect levels give zero rows)."""
        kind = self.spec.kind
        if kind == UNIVARIATE:
            x = _as_vector(data[self.spec.variables[0]])
            return _radial_columns(x, self.state["knots"], self.state["z"]) - self.state["means"]
        if kind == TENSOR2:
            return _tensor_design(
                _as_vector(data[self.spec.variables[0]]),
                _as_vector(data[self.spec.variables[1]]),
                self.state,
            )
        if kind == LINEAR:
            x = _as_vector(data[self.spec.variables[0]])
            return (x - self.state["means"][0])[:, None]
        return _indicator_design(data[self.spec.variables[0]], self.levels)

    def level_index(self, values: Sequence[str]) -> np.ndarray:
        """Position of each value in ``levels`` (-1 when unseen)."""
        lookup = {lvl: i for i, lvl in enumerate(self.levels)}
        return np.array([lookup.get(str(v), -1) for v in values], dtype=np.int64)


def _as_vector(x: Any) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr.reshape(-1)


# =============================================================================
# Univariate
# =============================================================================

def _radial_columns(x: np.ndarray, knots: np.ndarray, z: np.ndarray) -> np.ndarray:
    radial = np.abs(x[:, None] - knots[None, :]) ** 3 / 12.0
    return np.column_stack([radial @ z, x])


def _univariate_state(x: np.ndarray, k: int) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Return (state, centered design, unscaled penalty)."""
    if k < MIN_UNIVARIATE_RANK:
        raise RankError(f"rank must be >= {MIN_UNIVARIATE_RANK}, got {k}")
    if not np.all(np.isfinite(x)):
        raise RankError("covariate contains non-finite values")
    distinct = np.unique(x)
    if distinct.size < k:
        raise RankError(f"need >= {k} distinct covariate values, found {distinct.size}")

    knots = np.quantile(distinct, np.linspace(0.0, 1.0, k))
    t = np.column_stack([np.ones(k), knots])
    q, _ = la.qr(t, mode="full")
    z = q[:, 2:]

    omega = np.abs(knots[:, None] - knots[None, :]) ** 3 / 12.0
    inner = z.T @ omega @ z
    penalty = np.zeros((k - 1, k - 1))
    penalty[: k - 2, : k - 2] = (inner + inner.T) / 2.0

    raw = _radial_columns(x, knots, z)
    means = raw.mean(axis=0)
    state = {"knots": knots, "z": z, "means": means}
    return state, raw - means, penalty


def _scale_penalty(design: np.ndarray, penalty: np.ndarray) -> tuple[np.ndarray, float]:
    norm_s = np.linalg.norm(penalty)
    if norm_s == 0.0:
        return penalty, 1.0
    scale = float(np.linalg.norm(design) ** 2 / norm_s)
    return penalty * scale, scale


def build_univariate(x: Sequence[float], rank: int = 10, variable: str = "x") -> BasisBlock:
    x = _as_vector(x)
    state, design, penalty = _univariate_state(x, rank)
    scaled, scale = _scale_penalty(design, penalty)
    return BasisBlock(
        spec=SmoothSpec(UNIVARIATE, (variable,), (rank,)),
        design=design,
        penalties=(scaled,),
        penalty_scales=(scale,),
        state=state,
    )


# =============================================================================
# Tensor interaction
# =============================================================================

def _row_kron(b1: np.ndarray, b2: np.ndarray) -> np.ndarray:
    n = b1.shape[0]
    return (b1[:, :, None] * b2[:, None, :]).reshape(n, b1.shape[1] * b2.shape[1])


def _main_effects(b1: np.ndarray, b2: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(b1.shape[0]), b1, b2])


def _tensor_design(x1: np.ndarray, x2: np.ndarray, state: Mapping[str, np.ndarray]) -> np.ndarray:
    b1 = _radial_columns(x1, state["knots1"], state["z1"]) - state["means1"]
    b2 = _radial_columns(x2, state["knots2"], state["z2"]) - state["means2"]
    return _row_kron(b1, b2) - _main_effects(b1, b2) @ state["projection"]


def build_tensor2(
    x1: Sequence[float],
    x2: Sequence[float],
    ranks: tuple[int, int] = (5, 5),
    variables: tuple[str, str] = ("x1", "x2"),
) -> BasisBlock:
    """Interaction-only tensor block with one penalty per margin."""
    x1, x2 = _as_vector(x1), _as_vector(x2)
    if x1.shape != x2.shape:
        raise RankError("tensor margins must have the same length")
    k1, k2 = ranks
    s1_state, b1, s1 = _univariate_state(x1, k1)
    s2_state, b2, s2 = _univariate_state(x2, k2)

    raw = _row_kron(b1, b2)
    main = _main_effects(b1, b2)
    projection, *_ = la.lstsq(main, raw)
    design = raw - main @ projection

    p1, p2 = k1 - 1, k2 - 1
    components = (np.kron(s1, np.eye(p2)), np.kron(np.eye(p1), s2))
    penalties, scales = [], []
    for comp in components:
        scaled, scale = _scale_penalty(design, comp)
        penalties.append(scaled)
        scales.append(scale)

    state = {
        "knots1": s1_state["knots"], "z1": s1_state["z"], "means1": s1_state["means"],
        "knots2": s2_state["knots"], "z2": s2_state["z"], "means2": s2_state["means"],
        "projection": projection,
    }
    return BasisBlock(
        spec=SmoothSpec(TENSOR2, tuple(variables), (k1, k2)),
        design=design,
        penalties=tuple(penalties),
        penalty_scales=tuple(scales),
        state=state,
    )


# =============================================================================
# Random intercept and linear terms
# =============================================================================

def _indicator_design(groups: Any, levels: Sequence[str]) -> np.ndarray:
    values = [str(g) for g in np.asarray(groups, dtype=object).reshape(-1)]
    lookup = {lvl: i for i, lvl in enumerate(levels)}
    design = np.zeros((len(values), len(levels)))
    for row, v in enumerate(values):
        col = lookup.get(v)
        if col is not None:
            design[row, col] = 1.0
    return design


def build_random_intercept(groups: Sequence[str], variable: str = "country") -> BasisBlock:
    """Gaussian random intercepts as an identity-penalized indicator block."""
    levels = tuple(sorted({str(g) for g in groups}))
    if len(levels) < 2:
        raise DegenerateGroupingError(f"grouping '{variable}' needs >= 2 levels, found {len(levels)}")
    return BasisBlock(
        spec=SmoothSpec(RANDOM_INTERCEPT, (variable,), (len(levels),)),
        design=_indicator_design(groups, levels),
        penalties=(np.eye(len(levels)),),
        penalty_scales=(1.0,),
        levels=levels,
    )


def build_linear(x: Sequence[float], variable: str = "x") -> BasisBlock:
    x = _as_vector(x)
    means = np.array([x.mean()])
    return BasisBlock(
        spec=SmoothSpec(LINEAR, (variable,)),
        design=(x - means[0])[:, None],
        penalties=(),
        penalty_scales=(),
        state={"means": means},
    )


def build_block(spec: SmoothSpec, data: Mapping[str, Any]) -> BasisBlock:
    if spec.kind == UNIVARIATE:
        return build_univariate(data[spec.variables[0]], spec.rank[0], spec.variables[0])
    if spec.kind == TENSOR2:
        return build_tensor2(
            data[spec.variables[0]], data[spec.variables[1]],
            (spec.rank[0], spec.rank[1]), (spec.variables[0], spec.variables[1]),
        )
    if spec.kind == RANDOM_INTERCEPT:
        return build_random_intercept(data[spec.variables[0]], spec.variables[0])
    return build_linear(data[spec.variables[0]], spec.variables[0])


def restore_block(
    spec: SmoothSpec,
    state: Mapping[str, np.ndarray],
    penalties: Sequence[np.ndarray],
    penalty_scales: Sequence[float],
    levels: Sequence[str] = (),
    n_coef: Optional[int] = None,
) -> BasisBlock:
    """Rebuild a block from stored state; the training design is not kept."""
    width = n_coef if n_coef is not None else (penalties[0].shape[0] if penalties else 1)
    return BasisBlock(
        spec=spec,
        design=np.empty((0, width)),
        penalties=tuple(np.asarray(p, dtype=np.float64) for p in penalties),
        penalty_scales=tuple(float(s) for s in penalty_scales),
        state={k: np.asarray(v, dtype=np.float64) for k, v in state.items()},
        levels=tuple(levels),
    )


def is_psd(matrix: np.ndarray, tol: float = PSD_TOLERANCE) -> bool:
    if not np.allclose(matrix, matrix.T, atol=0.0, rtol=0.0):
        return False
    scale = max(1.0, float(np.abs(matrix).max()))
    return bool(np.linalg.eigvalsh(matrix).min() >= -tol * scale)
