#!/usr/bin/env python3
"""
Beta-regression GAMM: mean mu on the logit link, single precision phi.

    y ~ Beta(mu * phi, (1 - mu) * phi)
    logit(mu) = b0 + sum_k f_k(x_k) + sum_l f_l(x_a, x_b) + delta_group

Fitting:
- inner loop: penalized IRLS (Fisher scoring) for fixed (lambda, phi) with step-halving
- middle: Newton on ln(phi) given mu, alternated with the inner loop
- outer: coordinate-wise GCV grid search over one lambda per penalty component

Random intercepts are identity-penalized indicator blocks, so their lambda is
selected the same way as spline smoothness.
"""

from __future__ import annotations

import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import scipy.linalg as la
import structlog
from scipy.special import digamma, expit, gammaln, polygamma

if __package__:
    from .basis import (
        LINEAR, RANDOM_INTERCEPT, TENSOR2, UNIVARIATE,
        BasisBlock, SmoothSpec, build_block,
    )
    from .ingest import (
        FEATURE_NAMES, SPLIT_FEATURE_NAMES, LabelRecord, LabelSet, UnitFeatures,
        join_labels, squeeze_response,
    )
else:
    from basis import (
        LINEAR, RANDOM_INTERCEPT, TENSOR2, UNIVARIATE,
        BasisBlock, SmoothSpec, build_block,
    )
    from ingest import (
        FEATURE_NAMES, SPLIT_FEATURE_NAMES, LabelRecord, LabelSet, UnitFeatures,
        join_labels, squeeze_response,
    )

log = structlog.get_logger(__name__)

# =============================================================================
# Constants
# =============================================================================

MU_EPS = 1e-9
PHI_MIN = 1e-3
PHI_MAX = 1e8
PHI_INIT_BOUNDS = (1.0, 1e4)
SOLVE_RIDGE = 1e-12

LINEAR_STRUCTURE = "linear"
SMOOTHS = "smooths"
SMOOTHS_RE = "smooths+RE"
SMOOTHS_RE_INTERACTIONS = "smooths+RE+interactions"
STRUCTURES = (LINEAR_STRUCTURE, SMOOTHS, SMOOTHS_RE, SMOOTHS_RE_INTERACTIONS)
GROUPINGS = ("country", "region")

DEFAULT_UNIVARIATE_RANK = 10
DEFAULT_TENSOR_RANK = (5, 5)
INTERACTION_PAIRS = (("ln_gdp_median", "ln_rural_prop"), ("ln_gdp_median", "ln_pop_density"))

PATH_COUNTRY = "country"
PATH_REGION = "region"
PATH_NONE = "none"
PATH_FIXED = "fixed"


class DomainError(ValueError):
    """Raised when likelihood inputs fall outside their domains."""


class ModelSpecError(ValueError):
    """Raised for inconsistent model specifications or unusable training data."""


class UnknownTermError(ModelSpecError, LookupError):
    """Raised when a requested term is not part of the model."""


class MetricsError(ValueError):
    """Raised when a metric is undefined for the supplied data."""


class ConvergenceError(RuntimeError):
    """Raised when fitting does not converge; ``state`` holds the last iterate."""

    def __init__(self, message: str, state: Optional["FitState"] = None):
        super().__init__(message)
        self.state = state


# =============================================================================
# Specification and configuration
# =============================================================================

@dataclass(frozen=True)
class ModelSpec:
    terms: tuple[SmoothSpec, ...]
    structure: str = SMOOTHS_RE_INTERACTIONS
    grouping: str = "country"

    def __post_init__(self) -> None:
        if self.structure not in STRUCTURES:
            raise ModelSpecError(f"unknown structure '{self.structure}'. Supported: {', '.join(STRUCTURES)}")
        if self.grouping not in GROUPINGS:
            raise ModelSpecError(f"unknown grouping '{self.grouping}'. Supported: {', '.join(GROUPINGS)}")
        kinds = Counter(t.kind for t in self.terms)
        has_re = kinds[RANDOM_INTERCEPT] > 0
        has_te = kinds[TENSOR2] > 0
        if self.structure == LINEAR_STRUCTURE and set(kinds) - {LINEAR}:
            raise ModelSpecError("linear structure admits only linear terms")
        if self.structure != LINEAR_STRUCTURE and kinds[UNIVARIATE] == 0:
            raise ModelSpecError(f"structure '{self.structure}' needs at least one univariate smooth")
        if has_re != (self.structure in (SMOOTHS_RE, SMOOTHS_RE_INTERACTIONS)):
            raise ModelSpecError(f"structure '{self.structure}' inconsistent with random-intercept terms")
        if has_te != (self.structure == SMOOTHS_RE_INTERACTIONS):
            raise ModelSpecError(f"structure '{self.structure}' inconsistent with tensor terms")
        if kinds[RANDOM_INTERCEPT] > 1:
            raise ModelSpecError("at most one random-intercept term is supported")
        for t in self.terms:
            if t.kind == RANDOM_INTERCEPT and t.variables[0] != self.grouping:
                raise ModelSpecError(f"random intercept on '{t.variables[0]}' but grouping is '{self.grouping}'")

    @classmethod
    def default(
        cls,
        structure: str = SMOOTHS_RE_INTERACTIONS,
        grouping: str = "country",
        agland_mode: str = "combined",
        univariate_rank: int = DEFAULT_UNIVARIATE_RANK,
        tensor_rank: tuple[int, int] = DEFAULT_TENSOR_RANK,
    ) -> "ModelSpec":
        features = list(FEATURE_NAMES[:3])
        features += ["ln_agland"] if agland_mode == "combined" else list(SPLIT_FEATURE_NAMES)

        if structure == LINEAR_STRUCTURE:
            terms = [SmoothSpec(LINEAR, (f,)) for f in features]
        else:
            terms = [SmoothSpec(UNIVARIATE, (f,), (univariate_rank,)) for f in features]
        if structure in (SMOOTHS_RE, SMOOTHS_RE_INTERACTIONS):
            terms.append(SmoothSpec(RANDOM_INTERCEPT, (grouping,), ()))
        if structure == SMOOTHS_RE_INTERACTIONS:
            terms += [SmoothSpec(TENSOR2, pair, tuple(tensor_rank)) for pair in INTERACTION_PAIRS]
        return cls(tuple(terms), structure, grouping)

    def with_grouping(self, grouping: str) -> "ModelSpec":
        terms = tuple(
            SmoothSpec(RANDOM_INTERCEPT, (grouping,), ()) if t.kind == RANDOM_INTERCEPT else t
            for t in self.terms
        )
        return ModelSpec(terms, self.structure, grouping)

    def feature_names(self) -> list[str]:
        names: list[str] = []
        for t in self.terms:
            if t.kind != RANDOM_INTERCEPT:
                names.extend(v for v in t.variables if v not in names)
        return names

    @property
    def has_random_intercept(self) -> bool:
        return any(t.kind == RANDOM_INTERCEPT for t in self.terms)


@dataclass(frozen=True)
class FitConfig:
    lambda_min: float = 1e-4
    lambda_max: float = 1e6
    lambda_points: int = 11
    sweeps: int = 2
    patience: int = 3
    fixed_lambda: Optional[float] = None
    tol: float = 1e-8
    max_iter: int = 200
    max_halvings: int = 10
    phi_tol: float = 1e-6
    max_phi_rounds: int = 50
    region_model: bool = True
    min_rows: int = 50
    threads: int = 1

    def lambda_grid(self) -> np.ndarray:
        return np.logspace(math.log10(self.lambda_min), math.log10(self.lambda_max), self.lambda_points)


# =============================================================================
# Likelihood
# =============================================================================

def _clamp_mu(mu: np.ndarray) -> np.ndarray:
    return np.clip(mu, MU_EPS, 1.0 - MU_EPS)


def _loglik_terms(y: np.ndarray, mu: np.ndarray, phi: float) -> np.ndarray:
    mu = _clamp_mu(mu)
    a, b = mu * phi, (1.0 - mu) * phi
    return gammaln(phi) - gammaln(a) - gammaln(b) + (a - 1.0) * np.log(y) + (b - 1.0) * np.log1p(-y)


def beta_loglik(y, mu, phi: float) -> float:
    """Sum of Beta(mu*phi, (1-mu)*phi) log densities."""
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if not (np.isfinite(phi) and phi > 0):
        raise DomainError(f"phi must be > 0, got {phi!r}")
    if np.any(~np.isfinite(y)) or np.any((y <= 0.0) | (y >= 1.0)):
        raise DomainError("y must lie in the open interval (0, 1)")
    if np.any(~np.isfinite(mu)) or np.any((mu < 0.0) | (mu > 1.0)):
        raise DomainError("mu must lie in [0, 1]")
    return float(np.sum(_loglik_terms(y, mu, phi)))


def _ystar(y: np.ndarray) -> np.ndarray:
    return np.log(y) - np.log1p(-y)


def beta_loglik_gradient(y, eta, ln_phi: float) -> tuple[np.ndarray, float]:
    """Derivatives of the log likelihood w.r.t. the linear predictor and ln(phi)."""
    y = np.asarray(y, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    phi = math.exp(ln_phi)
    mu = _clamp_mu(expit(eta))
    mustar = digamma(mu * phi) - digamma((1.0 - mu) * phi)
    d_eta = phi * (_ystar(y) - mustar) * mu * (1.0 - mu)
    d_lnphi = phi * np.sum(
        digamma(phi) - mu * digamma(mu * phi) - (1.0 - mu) * digamma((1.0 - mu) * phi)
        + mu * np.log(y) + (1.0 - mu) * np.log1p(-y)
    )
    return d_eta, float(d_lnphi)


def penalized_objective(beta: np.ndarray, ln_phi: float, X: np.ndarray, y: np.ndarray, S: np.ndarray) -> float:
    eta = X @ beta
    return float(np.sum(_loglik_terms(y, expit(eta), math.exp(ln_phi))) - 0.5 * beta @ S @ beta)


def penalized_score(
    beta: np.ndarray, ln_phi: float, X: np.ndarray, y: np.ndarray, S: np.ndarray
) -> tuple[np.ndarray, float]:
    d_eta, d_lnphi = beta_loglik_gradient(y, X @ beta, ln_phi)
    return X.T @ d_eta - S @ beta, d_lnphi


def _fisher_weights(mu: np.ndarray, phi: float) -> np.ndarray:
    dmu = mu * (1.0 - mu)
    return phi ** 2 * (polygamma(1, mu * phi) + polygamma(1, (1.0 - mu) * phi)) * dmu ** 2


def _saturated_mu(y: np.ndarray, phi: float, iterations: int = 50) -> np.ndarray:
    """Per-observation mu maximizing the Beta density at fixed phi."""
    target = _ystar(y)
    t = target.copy()
    for _ in range(iterations):
        mu = _clamp_mu(expit(t))
        resid = digamma(mu * phi) - digamma((1.0 - mu) * phi) - target
        slope = phi * (polygamma(1, mu * phi) + polygamma(1, (1.0 - mu) * phi)) * mu * (1.0 - mu)
        step = np.clip(resid / slope, -1.0, 1.0)
        t = t - step
        if np.max(np.abs(step)) < 1e-13:
            break
    return _clamp_mu(expit(t))


def beta_deviance(y: np.ndarray, mu: np.ndarray, phi: float) -> float:
    """2 * sum(l_sat - l); the saturated mean maximizes each observation's density."""
    sat = _loglik_terms(y, _saturated_mu(y, phi), phi)
    return float(np.sum(np.maximum(2.0 * (sat - _loglik_terms(y, mu, phi)), 0.0)))


# =============================================================================
# Model data
# =============================================================================

@dataclass(frozen=True, eq=False)
class ModelData:
    """Joined rows in model-ready form."""

    y: np.ndarray
    columns: Mapping[str, np.ndarray]
    countries: np.ndarray
    regions: np.ndarray
    keys: tuple[tuple[str, int], ...]

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def from_joined(cls, rows: Sequence[tuple[LabelRecord, UnitFeatures]]) -> "ModelData":
        names = list(FEATURE_NAMES)
        if rows and rows[0][1].ln_cropland is not None:
            names += list(SPLIT_FEATURE_NAMES)
        columns = {n: np.array([f.value(n) for _, f in rows], dtype=np.float64) for n in names}
        countries = np.array([r.country_iso3 for r, _ in rows], dtype=object)
        regions = np.array([r.region_code for r, _ in rows], dtype=object)
        columns["country"] = countries
        columns["region"] = regions
        y = squeeze_response(np.array([r.epwa for r, _ in rows], dtype=np.float64))
        return cls(np.atleast_1d(y), columns, countries, regions, tuple(r.key for r, _ in rows))

    @classmethod
    def from_labels(cls, records: Iterable[LabelRecord], features: Iterable[UnitFeatures]) -> "ModelData":
        return cls.from_joined(join_labels(records, features))

    def subset(self, index: np.ndarray) -> "ModelData":
        index = np.asarray(index, dtype=np.int64)
        return ModelData(
            self.y[index],
            {k: v[index] for k, v in self.columns.items()},
            self.countries[index],
            self.regions[index],
            tuple(self.keys[i] for i in index),
        )


# =============================================================================
# Fitted model
# =============================================================================

@dataclass(frozen=True)
class FitDiagnostics:
    n: int
    deviance: float
    loglik: float
    edf: float
    gcv: float
    iterations: int
    converged: bool
    pll_trace: tuple[float, ...] = ()
    gcv_path: tuple[tuple[int, float, float], ...] = ()


@dataclass(frozen=True)
class FitMetrics:
    gcv: float
    aic: float
    explained_variance: float
    r2: float
    rmse: float

    def as_dict(self) -> dict[str, float]:
        return {
            "gcv": self.gcv,
            "aic": self.aic,
            "explained_variance": self.explained_variance,
            "r2": self.r2,
            "rmse": self.rmse,
        }


@dataclass(frozen=True)
class Prediction:
    mu: float
    path: str


@dataclass(frozen=True, eq=False)
class GridPrediction:
    mu: np.ndarray
    eta: np.ndarray
    path: np.ndarray

    def path_counts(self) -> dict[str, int]:
        return dict(sorted(Counter(self.path.tolist()).items()))


@dataclass(frozen=True, eq=False)
class FittedModel:
    spec: ModelSpec
    blocks: tuple[BasisBlock, ...]
    coefficients: np.ndarray
    lambdas: np.ndarray
    phi: float
    covariance: np.ndarray
    feature_ranges: Mapping[str, tuple[float, float]]
    diagnostics: FitDiagnostics
    country_regions: Mapping[str, str] = field(default_factory=dict)
    regional: Optional["FittedModel"] = None

    @property
    def intercept(self) -> float:
        return float(self.coefficients[0])

    def block_slices(self) -> list[slice]:
        out, start = [], 1
        for b in self.blocks:
            out.append(slice(start, start + b.n_coef))
            start += b.n_coef
        return out

    def random_block(self) -> Optional[tuple[BasisBlock, np.ndarray]]:
        for b, sl in zip(self.blocks, self.block_slices()):
            if b.spec.kind == RANDOM_INTERCEPT:
                return b, self.coefficients[sl]
        return None

    def random_effects(self) -> dict[str, float]:
        found = self.random_block()
        if found is None:
            return {}
        block, coef = found
        return {lvl: float(c) for lvl, c in zip(block.levels, coef)}

    def country_effects(self) -> dict[str, float]:
        return self.random_effects() if self.spec.grouping == "country" else {}

    def region_effects(self) -> dict[str, float]:
        if self.spec.grouping == "region":
            return self.random_effects()
        return self.regional.random_effects() if self.regional is not None else {}

    def fixed_eta(self, columns: Mapping[str, Any]) -> np.ndarray:
        n = _column_length(columns, self.spec.feature_names())
        eta = np.full(n, self.intercept)
        for b, sl in zip(self.blocks, self.block_slices()):
            if b.spec.kind != RANDOM_INTERCEPT:
                eta = eta + b.evaluate(columns) @ self.coefficients[sl]
        return eta


def _column_length(columns: Mapping[str, Any], names: Sequence[str]) -> int:
    for name in names:
        if name in columns:
            return len(np.asarray(columns[name]).reshape(-1))
    for value in columns.values():
        return len(np.asarray(value).reshape(-1))
    return 0


# =============================================================================
# Penalized IRLS
# =============================================================================

@dataclass(frozen=True, eq=False)
class FitState:
    beta: np.ndarray
    phi: float
    eta: np.ndarray
    iterations: int
    converged: bool
    pll_trace: tuple[float, ...]


def _solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ridge = SOLVE_RIDGE * max(1.0, float(np.trace(a)) / a.shape[0])
    try:
        factor = la.cho_factor(a + ridge * np.eye(a.shape[0]), check_finite=False)
        return la.cho_solve(factor, b, check_finite=False)
    except la.LinAlgError:
        return la.lstsq(a, b)[0]


def _pll(y: np.ndarray, eta: np.ndarray, beta: np.ndarray, S: np.ndarray, phi: float) -> float:
    return float(np.sum(_loglik_terms(y, expit(eta), phi)) - 0.5 * beta @ S @ beta)


def _saturated_terms(y: np.ndarray, phi: float) -> np.ndarray:
    return _loglik_terms(y, _saturated_mu(y, phi), phi)


def _deviance(sat: np.ndarray, y: np.ndarray, mu: np.ndarray, phi: float) -> float:
    return float(np.sum(np.maximum(2.0 * (sat - _loglik_terms(y, mu, phi)), 0.0)))


def _irls(
    X: np.ndarray,
    y: np.ndarray,
    S: np.ndarray,
    beta: np.ndarray,
    phi: float,
    cfg: FitConfig,
    sat: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray, int, bool, list[float]]:
    if sat is None:
        sat = _saturated_terms(y, phi)
    eta = X @ beta
    pll = _pll(y, eta, beta, S, phi)
    dev = _deviance(sat, y, expit(eta), phi)
    trace = [pll]
    ystar = _ystar(y)

    for it in range(1, cfg.max_iter + 1):
        mu = _clamp_mu(expit(eta))
        w = _fisher_weights(mu, phi)
        score = phi * (ystar - (digamma(mu * phi) - digamma((1.0 - mu) * phi))) * mu * (1.0 - mu)
        z = eta + score / w
        xtw = X.T * w
        candidate = _solve(xtw @ X + S, xtw @ z)

        cand_eta = X @ candidate
        cand_pll = _pll(y, cand_eta, candidate, S, phi)
        halvings = 0
        while cand_pll < pll and halvings < cfg.max_halvings:
            candidate = 0.5 * (beta + candidate)
            cand_eta = X @ candidate
            cand_pll = _pll(y, cand_eta, candidate, S, phi)
            halvings += 1
        if cand_pll < pll:
            # no improving step left: beta is already at the penalized optimum
            return beta, eta, it, True, trace

        cand_dev = _deviance(sat, y, expit(cand_eta), phi)
        beta, eta, pll = candidate, cand_eta, cand_pll
        trace.append(pll)
        if abs(cand_dev - dev) / (abs(cand_dev) + 0.1) < cfg.tol:
            return beta, eta, it, True, trace
        dev = cand_dev

    return beta, eta, cfg.max_iter, False, trace


def _profile_phi(y: np.ndarray, mu: np.ndarray, phi: float) -> float:
    """Newton on ln(phi) for the Beta log likelihood at fixed mu."""
    mu = _clamp_mu(mu)
    log_y, log_1my = np.log(y), np.log1p(-y)
    ln_min, ln_max = math.log(PHI_MIN), math.log(PHI_MAX)

    def loglik(lp: float) -> float:
        return float(np.sum(_loglik_terms(y, mu, math.exp(lp))))

    lp = math.log(phi)
    current = loglik(lp)
    for _ in range(100):
        p = math.exp(lp)
        g = p * float(np.sum(
            digamma(p) - mu * digamma(mu * p) - (1.0 - mu) * digamma((1.0 - mu) * p)
            + mu * log_y + (1.0 - mu) * log_1my
        ))
        h = g + p ** 2 * float(np.sum(
            polygamma(1, p) - mu ** 2 * polygamma(1, mu * p) - (1.0 - mu) ** 2 * polygamma(1, (1.0 - mu) * p)
        ))
        step = -g / h if h < 0 else math.copysign(1.0, g)
        step = max(-2.0, min(2.0, step))
        for _ in range(30):
            trial = max(ln_min, min(ln_max, lp + step))
            value = loglik(trial)
            if value >= current:
                break
            step /= 2.0
        else:
            break
        moved = abs(trial - lp)
        lp, current = trial, value
        if moved < 1e-10:
            break
    return math.exp(lp)


def _initial_phi(y: np.ndarray) -> float:
    mean = float(np.mean(y))
    var = float(np.var(y))
    if var <= 0.0:
        return PHI_INIT_BOUNDS[1]
    return min(max(mean * (1.0 - mean) / var - 1.0, PHI_INIT_BOUNDS[0]), PHI_INIT_BOUNDS[1])


def _fit_fixed_lambda(
    X: np.ndarray, y: np.ndarray, S: np.ndarray, beta: np.ndarray, phi: float, cfg: FitConfig
) -> FitState:
    total, trace = 0, []
    converged = False
    eta = X @ beta
    for _ in range(cfg.max_phi_rounds):
        beta, eta, iterations, ok, part = _irls(X, y, S, beta, phi, cfg)
        total += iterations
        trace.extend(part)
        if not ok:
            break
        new_phi = _profile_phi(y, expit(eta), phi)
        moved = abs(math.log(new_phi) - math.log(phi))
        phi = new_phi
        trace.append(_pll(y, eta, beta, S, phi))
        if moved < cfg.phi_tol:
            converged = True
            break
    return FitState(beta, phi, eta, total, converged, tuple(trace))


# =============================================================================
# Design assembly and GCV search
# =============================================================================

def _penalty_components(blocks: Sequence[BasisBlock]) -> list[np.ndarray]:
    p = 1 + sum(b.n_coef for b in blocks)
    comps, start = [], 1
    for b in blocks:
        for pen in b.penalties:
            full = np.zeros((p, p))
            full[start:start + b.n_coef, start:start + b.n_coef] = pen
            comps.append(full)
        start += b.n_coef
    return comps


def _total_penalty(components: Sequence[np.ndarray], lambdas: np.ndarray, p: int) -> np.ndarray:
    S = np.zeros((p, p))
    for lam, comp in zip(lambdas, components):
        S += lam * comp
    return S


@dataclass(frozen=True, eq=False)
class _Scored:
    lambdas: np.ndarray
    state: FitState
    gcv: float
    deviance: float
    edf: float
    covariance: np.ndarray


def _score(
    X: np.ndarray, y: np.ndarray, S: np.ndarray, state: FitState, sat: Optional[np.ndarray] = None
) -> tuple[float, float, float, np.ndarray]:
    if sat is None:
        sat = _saturated_terms(y, state.phi)
    mu = _clamp_mu(expit(state.eta))
    xtwx = (X.T * _fisher_weights(mu, state.phi)) @ X
    a = xtwx + S
    covariance = _solve(a, np.eye(a.shape[0]))
    covariance = (covariance + covariance.T) / 2.0
    edf = float(np.sum(covariance * xtwx))
    dev = _deviance(sat, y, mu, state.phi)
    n = len(y)
    gcv = n * dev / (n - edf) ** 2 if n > edf else math.inf
    return gcv, dev, edf, covariance


def _evaluate(X, y, components, lambdas, start: FitState, cfg: FitConfig) -> _Scored:
    """Full fit at fixed lambdas: IRLS alternated with phi profiling."""
    S = _total_penalty(components, lambdas, X.shape[1])
    state = _fit_fixed_lambda(X, y, S, start.beta.copy(), start.phi, cfg)
    gcv, dev, edf, cov = _score(X, y, S, state)
    if not state.converged:
        gcv = math.inf
    return _Scored(lambdas, state, gcv, dev, edf, cov)


def _evaluate_at_phi(X, y, components, lambdas, start: FitState, sat: np.ndarray, cfg: FitConfig) -> _Scored:
    """Search-time fit: IRLS only, phi held at ``start.phi``."""
    S = _total_penalty(components, lambdas, X.shape[1])
    beta, eta, iterations, ok, trace = _irls(X, y, S, start.beta.copy(), start.phi, cfg, sat)
    state = FitState(beta, start.phi, eta, iterations, ok, tuple(trace))
    gcv, dev, edf, cov = _score(X, y, S, state, sat)
    if not ok:
        gcv = math.inf
    return _Scored(lambdas, state, gcv, dev, edf, cov)


def _better(res: _Scored, chosen: _Scored) -> bool:
    # ties keep the smaller lambda vector
    return res.gcv < chosen.gcv or (res.gcv == chosen.gcv and tuple(res.lambdas) < tuple(chosen.lambdas))


def _search_lambdas(X, y, components, start: FitState, cfg: FitConfig) -> tuple[_Scored, list[tuple[int, float, float]]]:
    """Coordinate-wise GCV search over one lambda per penalty component.

    Candidates along a coordinate are fitted at the incumbent phi, each
    warm-started from the previous grid point; a scan stops once GCV has
    risen ``patience`` times in a row past its best point. Only the chosen
    lambdas are refitted with phi profiling.
    """
    m = len(components)
    if cfg.fixed_lambda is not None or m == 0:
        value = cfg.fixed_lambda if cfg.fixed_lambda is not None else 1.0
        return _evaluate(X, y, components, np.full(m, float(value)), start, cfg), []

    grid = cfg.lambda_grid()
    best = _evaluate(X, y, components, np.ones(m), start, cfg)
    path: list[tuple[int, float, float]] = []
    for sweep in range(cfg.sweeps):
        changed = False
        for j in range(m):
            base = best
            sat = _saturated_terms(y, base.state.phi)
            chosen = base
            warm = base.state
            rises, previous = 0, math.inf
            for g in grid:
                lam = base.lambdas.copy()
                lam[j] = g
                res = _evaluate_at_phi(X, y, components, lam, warm, sat, cfg)
                path.append((j, float(g), float(res.gcv)))
                if res.state.converged:
                    warm = res.state
                if _better(res, chosen):
                    chosen = res
                rises = rises + 1 if res.gcv > previous else 0
                previous = res.gcv
                if rises >= cfg.patience and res.gcv > chosen.gcv:
                    break
            if chosen is not base:
                best = _evaluate(X, y, components, chosen.lambdas, chosen.state, cfg)
                changed = True
        log.debug("gcv_sweep", sweep=sweep + 1, gcv=best.gcv, lambdas=[float(v) for v in best.lambdas])
        if not changed:
            break
    return best, path


def _build_blocks(spec: ModelSpec, data: ModelData) -> tuple[BasisBlock, ...]:
    return tuple(build_block(term, data.columns) for term in spec.terms)


def fit_data(spec: ModelSpec, data: ModelData, config: Optional[FitConfig] = None) -> FittedModel:
    """Fit ``spec`` to model-ready rows."""
    cfg = config or FitConfig()
    n = len(data)
    if n < cfg.min_rows:
        raise ModelSpecError(f"need >= {cfg.min_rows} training rows, got {n}")
    missing = [name for name in spec.feature_names() if name not in data.columns]
    if missing:
        raise ModelSpecError(f"training data lacks features {missing}")

    blocks = _build_blocks(spec, data)
    X = np.column_stack([np.ones(n), *[b.design for b in blocks]])
    y = data.y
    components = _penalty_components(blocks)

    beta0 = np.zeros(X.shape[1])
    mean_y = float(np.mean(y))
    beta0[0] = math.log(mean_y / (1.0 - mean_y))
    start = FitState(beta0, _initial_phi(y), X @ beta0, 0, True, ())

    best, path = _search_lambdas(X, y, components, start, cfg)
    state = best.state
    if not state.converged:
        raise ConvergenceError(
            f"fit did not converge after {state.iterations} IRLS iterations (phi={state.phi:.6g})", state
        )

    loglik = float(np.sum(_loglik_terms(y, expit(state.eta), state.phi)))
    diagnostics = FitDiagnostics(
        n=n,
        deviance=best.deviance,
        loglik=loglik,
        edf=best.edf,
        gcv=best.gcv,
        iterations=state.iterations,
        converged=True,
        pll_trace=state.pll_trace,
        gcv_path=tuple(path),
    )
    ranges = {
        name: (float(np.min(data.columns[name])), float(np.max(data.columns[name])))
        for name in spec.feature_names()
    }
    country_regions: dict[str, str] = {}
    for c, r in zip(data.countries, data.regions):
        country_regions.setdefault(str(c), str(r))

    model = FittedModel(
        spec=spec,
        blocks=blocks,
        coefficients=state.beta,
        lambdas=best.lambdas,
        phi=state.phi,
        covariance=best.covariance,
        feature_ranges=ranges,
        diagnostics=diagnostics,
        country_regions=dict(sorted(country_regions.items())),
    )
    log.info(
        "fit_converged",
        structure=spec.structure,
        grouping=spec.grouping,
        n=n,
        iterations=state.iterations,
        phi=state.phi,
        edf=best.edf,
        gcv=best.gcv,
    )

    if cfg.region_model and spec.has_random_intercept and spec.grouping == "country":
        try:
            regional = fit_data(spec.with_grouping("region"), data, replace(cfg, region_model=False))
        except ValueError as exc:
            log.warning("regional_model_skipped", reason=str(exc))
        else:
            model = replace(model, regional=regional)
    return model


def fit(
    spec: ModelSpec,
    labels: LabelSet,
    features: Iterable[UnitFeatures],
    config: Optional[FitConfig] = None,
) -> FittedModel:
    """Join labels to features and fit."""
    return fit_data(spec, ModelData.from_labels(labels.records, features), config)


# =============================================================================
# Prediction
# =============================================================================

def predict_arrays(
    model: FittedModel,
    columns: Mapping[str, Any],
    countries: Sequence[str],
    regions: Sequence[str],
) -> GridPrediction:
    """Vectorized prediction with country -> regional model -> no-effect fallback."""
    fixed = model.fixed_eta(columns)
    n = len(fixed)
    countries = np.asarray(countries, dtype=object).reshape(-1)
    regions = np.asarray(regions, dtype=object).reshape(-1)

    found = model.random_block()
    if found is None:
        return GridPrediction(_mu(fixed), fixed, np.full(n, PATH_FIXED, dtype=object))

    block, delta = found
    grouping = block.spec.variables[0]
    idx = block.level_index(countries if grouping == "country" else regions)
    hit = idx >= 0
    eta = fixed.copy()
    eta[hit] += delta[idx[hit]]
    path = np.where(hit, PATH_COUNTRY if grouping == "country" else PATH_REGION, PATH_NONE).astype(object)

    miss = np.flatnonzero(~hit)
    if miss.size and model.regional is not None:
        sub_cols = {k: np.asarray(v).reshape(-1)[miss] for k, v in columns.items()}
        sub = predict_arrays(model.regional, sub_cols, countries[miss], regions[miss])
        use = sub.path == PATH_REGION
        eta[miss[use]] = sub.eta[use]
        path[miss[use]] = PATH_REGION

    return GridPrediction(_mu(eta), eta, path)


def _mu(eta: np.ndarray) -> np.ndarray:
    return np.clip(expit(eta), MU_EPS, 1.0 - MU_EPS)


def predict(
    model: FittedModel,
    features: UnitFeatures | Mapping[str, float],
    country_iso3: str,
    region_code: str,
) -> Prediction:
    names = model.spec.feature_names()
    if isinstance(features, UnitFeatures):
        values = {n: features.value(n) for n in names}
    else:
        values = {n: float(features[n]) for n in names}
    bad = [n for n, v in values.items() if not math.isfinite(v)]
    if bad:
        raise DomainError(f"non-finite features {bad}")
    columns: dict[str, np.ndarray] = {n: np.array([v]) for n, v in values.items()}
    columns["country"] = np.array([country_iso3], dtype=object)
    columns["region"] = np.array([region_code], dtype=object)
    result = predict_arrays(model, columns, [country_iso3], [region_code])
    path = str(result.path[0])
    if path == PATH_NONE:
        log.warning("no_group_effect", country=country_iso3, region=region_code)
    return Prediction(float(result.mu[0]), path)


def predict_data(model: FittedModel, data: ModelData) -> GridPrediction:
    return predict_arrays(model, data.columns, data.countries, data.regions)


# =============================================================================
# Metrics and diagnostics
# =============================================================================

def metrics(model: FittedModel, data: ModelData) -> FitMetrics:
    n = len(data)
    if n == 0:
        raise MetricsError("metrics need at least one row")
    y = data.y
    mu = predict_data(model, data).mu
    resid = y - mu
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise MetricsError("response has zero variance; r2 undefined")
    edf = model.diagnostics.edf
    dev = beta_deviance(y, mu, model.phi)
    loglik = float(np.sum(_loglik_terms(y, mu, model.phi)))
    return FitMetrics(
        gcv=n * dev / (n - edf) ** 2 if n > edf else math.inf,
        aic=-2.0 * loglik + 2.0 * edf,
        explained_variance=1.0 - float(np.var(resid)) / float(np.var(y)),
        r2=1.0 - float(np.sum(resid ** 2)) / ss_tot,
        rmse=math.sqrt(float(np.mean(resid ** 2))),
    )


def rmse(observed: Sequence[float], predicted: Sequence[float]) -> float:
    diff = np.asarray(observed, dtype=np.float64) - np.asarray(predicted, dtype=np.float64)
    return math.sqrt(float(np.mean(diff ** 2))) if diff.size else 0.0


def structure_comparison(
    labels: LabelSet,
    features: Iterable[UnitFeatures],
    structures: Sequence[str] = STRUCTURES,
    config: Optional[FitConfig] = None,
    grouping: str = "country",
    agland_mode: str = "combined",
    univariate_rank: int = DEFAULT_UNIVARIATE_RANK,
    tensor_rank: tuple[int, int] = DEFAULT_TENSOR_RANK,
) -> list[tuple[str, FittedModel, FitMetrics]]:
    """Fit each structure on the same rows and score it on those rows.

    Structures are fitted concurrently on up to ``config.threads`` workers;
    results keep the order of ``structures``.
    """
    cfg = config or FitConfig()
    data = ModelData.from_labels(labels.records, features)
    specs = [ModelSpec.default(s, grouping, agland_mode, univariate_rank, tensor_rank) for s in structures]

    def run(spec: ModelSpec) -> tuple[str, FittedModel, FitMetrics]:
        model = fit_data(spec, data, cfg)
        return spec.structure, model, metrics(model, data)

    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as pool:
        return list(pool.map(run, specs))


def residual_diagnostics(model: FittedModel, data: ModelData, bins: int = 40) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Return (fitted-vs-observed rows, residual histogram counts)."""
    pred = predict_data(model, data)
    resid = data.y - pred.mu
    fitted = pd.DataFrame({
        "unit_id": [k[0] for k in data.keys],
        "year": [k[1] for k in data.keys],
        "country_iso3": list(data.countries),
        "observed": data.y,
        "fitted": pred.mu,
        "residual": resid,
        "path": list(pred.path),
    })
    counts, edges = np.histogram(resid, bins=bins)
    histogram = pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:], "count": counts})
    return fitted, histogram


# =============================================================================
# Partial effects
# =============================================================================

def _find_term(model: FittedModel, variable: str) -> tuple[BasisBlock, slice]:
    for b, sl in zip(model.blocks, model.block_slices()):
        if b.spec.kind in (UNIVARIATE, LINEAR) and b.spec.variables[0] == variable:
            return b, sl
    raise UnknownTermError(f"no univariate term for '{variable}'")


def partial_effect(model: FittedModel, variable: str, x: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """(effect, se) of one univariate term at ``x``; effects are centered over training data."""
    block, sl = _find_term(model, variable)
    design = block.evaluate({variable: np.asarray(x, dtype=np.float64)})
    coef = model.coefficients[sl]
    cov = model.covariance[sl, sl]
    se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", design, cov, design), 0.0))
    return design @ coef, se


def export_partial_effects(model: FittedModel, variable: str, grid_size: int = 200) -> pd.DataFrame:
    """Effect over an even grid on the training range with +/- 2 se bands."""
    _find_term(model, variable)
    lo, hi = model.feature_ranges[variable]
    grid = np.linspace(lo, hi, grid_size)
    effect, se = partial_effect(model, variable, grid)
    return pd.DataFrame({"x": grid, "effect": effect, "se_lo": effect - 2.0 * se, "se_hi": effect + 2.0 * se})
