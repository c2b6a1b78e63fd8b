"""Additive percentile model over the four per-token features.

The model is an intercept plus one learned smooth function per feature
(angular, magnitude, dimensional, position percentile), predicting the
token's within-prompt importance percentile. Smooths are cubic B-splines
with interior knots at feature quantiles, fitted by penalized least
squares with a second-difference (P-spline) penalty; per-term smoothing
parameters come from a grid searched with k-fold cross-validation whose
folds never split a prompt's rows.

The least-squares term is scaled by 1/n so smoothing strength is
independent of sample size (and uniform row duplication leaves the fit
unchanged).
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import rankdata

from .embeddings import EmbeddingTable, OovPolicy
from .errors import ModelFormatError, TokenlensError, TrainingDataError
from .preprocess import PreprocessConfig
from .scoring import ScoringConfig, analyze_prompt
from ._serialize import dumps_stable, loads

__all__ = [
    "FeatureRow",
    "SmoothTerm",
    "GamModel",
    "FitOptions",
    "TERM_NAMES",
    "position_percentile",
    "target_percentiles",
    "generate_training_data",
    "build_spline_basis",
    "evaluate_smooth",
    "fit_gam",
    "predict_percentile",
    "export_partial_dependence",
    "save_model",
    "load_model",
]

logger = logging.getLogger(__name__)

TERM_NAMES = ("angular", "magnitude", "dimensional", "position")

_DEGREE = 3  # cubic
_RIDGE = 1e-8  # breaks the constant-direction tie between intercept and terms


@dataclass(frozen=True)
class FeatureRow:
    """One token's features; ``target_percentile`` present only in training.

    ``group`` ties rows of one prompt together for cross-validation fold
    assignment; rows without a group are treated as independent.
    """

    a: float
    m: float
    d_score: float
    p: float
    target_percentile: float | None = None
    group: int | None = None

    def __post_init__(self):
        values = [self.a, self.m, self.d_score, self.p]
        if self.target_percentile is not None:
            values.append(self.target_percentile)
        if not all(np.isfinite(v) for v in values):
            raise ValueError("feature row contains non-finite values")
        if not 0.0 <= self.p <= 100.0:
            raise ValueError(f"position percentile {self.p} outside [0, 100]")
        if self.target_percentile is not None and not 0.0 <= self.target_percentile <= 100.0:
            raise ValueError(f"target percentile {self.target_percentile} outside [0, 100]")

    def features(self) -> tuple[float, float, float, float]:
        return (self.a, self.m, self.d_score, self.p)


@dataclass(frozen=True)
class SmoothTerm:
    """One fitted smooth: B-spline knots and coefficients plus fitted range."""

    knots: tuple[float, ...]
    coefficients: tuple[float, ...]
    feature_min: float
    feature_max: float

    def __post_init__(self):
        knots = np.asarray(self.knots)
        if knots.size < 2 or not np.all(np.diff(knots) > 0):
            raise ValueError("knots must be a strictly ascending sequence of >= 2 values")
        expected = knots.size + _DEGREE - 1
        if len(self.coefficients) != expected:
            raise ValueError(
                f"expected {expected} coefficients for {knots.size} knots, "
                f"got {len(self.coefficients)}"
            )


@dataclass(frozen=True)
class TrainingMeta:
    row_count: int
    cv_rmse: float
    cv_folds: int
    seed: int


@dataclass(frozen=True)
class GamModel:
    """Intercept plus four centered smooth terms (one per feature)."""

    beta0: float
    terms: tuple[SmoothTerm, SmoothTerm, SmoothTerm, SmoothTerm]
    lambdas: tuple[float, float, float, float]
    training_meta: TrainingMeta


@dataclass(frozen=True)
class FitOptions:
    knots: int = 10  # interior knots per term
    lambda_grid: tuple[float, ...] = (1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3)
    cv_folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.knots < 1:
            raise ValueError("need at least one interior knot")
        if not self.lambda_grid or any(l < 0 for l in self.lambda_grid):
            raise ValueError("lambda grid must be non-empty and non-negative")
        if self.cv_folds < 2:
            raise ValueError("cross-validation needs at least 2 folds")


def position_percentile(index: int, n: int) -> float:
    """Token position scaled to [0, 100]; a single-token prompt maps to 50."""
    if n < 1:
        raise ValueError("prompt length must be >= 1")
    if not 0 <= index < n:
        raise ValueError(f"token index {index} out of range for length {n}")
    if n == 1:
        return 50.0
    return 100.0 * index / (n - 1)


def target_percentiles(composites: Sequence[float]) -> np.ndarray:
    """Rank-based percentiles: 100 = most important, ties share mean rank."""
    values = np.asarray(composites, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot rank an empty score sequence")
    if values.size == 1:
        return np.array([100.0])
    ranks = rankdata(values, method="average")
    return 100.0 * (ranks - 1.0) / (values.size - 1.0)


def generate_training_data(
    corpus: Sequence[str],
    table: EmbeddingTable,
    pre_cfg: PreprocessConfig | None = None,
    score_cfg: ScoringConfig | None = None,
    policy: OovPolicy = OovPolicy.ZERO,
) -> list[FeatureRow]:
    """One feature row per scored token across the corpus.

    Targets are within-prompt percentile ranks of the composite score.
    Prompts that fail analysis are skipped with a logged reason; an empty
    yield is an error.
    """
    if not corpus:
        raise TrainingDataError("training corpus is empty")
    rows: list[FeatureRow] = []
    for prompt_id, text in enumerate(corpus):
        try:
            analysis = analyze_prompt(text, table, pre_cfg, score_cfg, policy)
        except TokenlensError as exc:
            logger.warning("skipping prompt %d: %s", prompt_id, exc)
            continue
        composites = [b.composite for b in analysis.breakdowns]
        targets = target_percentiles(composites)
        n = len(analysis.tokens)
        for item, breakdown, target in zip(analysis.resolved, analysis.breakdowns, targets):
            rows.append(
                FeatureRow(
                    a=breakdown.angular,
                    m=breakdown.magnitude,
                    d_score=breakdown.dimensional,
                    p=position_percentile(item.token.index, n),
                    target_percentile=float(target),
                    group=prompt_id,
                )
            )
    if not rows:
        raise TrainingDataError("no prompt in the corpus produced training rows")
    return rows


# ---------------------------------------------------------------------------
# Cubic B-spline basis


def _augment_knots(knots: np.ndarray) -> np.ndarray:
    return np.concatenate(
        [np.repeat(knots[0], _DEGREE), knots, np.repeat(knots[-1], _DEGREE)]
    )


def _find_spans(t: np.ndarray, n_user_knots: int, x: np.ndarray) -> np.ndarray:
    spans = np.searchsorted(t, x, side="right") - 1
    return np.clip(spans, _DEGREE, n_user_knots + 1)


def _deboor_nonzero(t: np.ndarray, span: int, x: float, degree: int) -> np.ndarray:
    """The degree+1 nonzero basis values at x, for basis indices span-degree..span."""
    values = np.zeros(degree + 1)
    values[0] = 1.0
    left = np.zeros(degree + 1)
    right = np.zeros(degree + 1)
    for d in range(1, degree + 1):
        left[d] = x - t[span + 1 - d]
        right[d] = t[span + d] - x
        saved = 0.0
        for r in range(d):
            temp = values[r] / (right[r + 1] + left[d - r])
            values[r] = saved + right[r + 1] * temp
            saved = left[d - r] * temp
        values[d] = saved
    return values


def _boundary_row_and_slope(t: np.ndarray, n_basis: int, span: int, x: float) -> tuple[np.ndarray, np.ndarray]:
    """Basis row and its one-sided derivative at a boundary point."""
    row = np.zeros(n_basis)
    row[span - _DEGREE : span + 1] = _deboor_nonzero(t, span, x, _DEGREE)

    quad = _deboor_nonzero(t, span, x, 2)  # indices span-2..span

    def quad_value(j: int) -> float:
        offset = j - (span - 2)
        return quad[offset] if 0 <= offset <= 2 else 0.0

    slope = np.zeros(n_basis)
    for j in range(span - _DEGREE, span + 1):
        acc = 0.0
        denom = t[j + _DEGREE] - t[j]
        if denom > 0:
            acc += quad_value(j) / denom
        denom = t[j + _DEGREE + 1] - t[j + 1]
        if denom > 0:
            acc -= quad_value(j + 1) / denom
        slope[j] = _DEGREE * acc
    return row, slope


def build_spline_basis(values: Sequence[float], knots: Sequence[float]) -> np.ndarray:
    """Cubic B-spline basis matrix (len(values) x (len(knots) + 2)).

    Inside [knots[0], knots[-1]] rows form a partition of unity. Outside,
    rows are the linear extrapolation of the boundary polynomial:
    row(b) + (x - b) * row'(b).
    """
    knots = np.asarray(knots, dtype=np.float64)
    if knots.size < 2 or not np.all(np.diff(knots) > 0):
        raise ValueError("need >= 2 strictly ascending knots")
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1:
        x = np.atleast_1d(x.ravel())

    t = _augment_knots(knots)
    n_basis = knots.size + _DEGREE - 1
    basis = np.zeros((x.size, n_basis))

    lo, hi = knots[0], knots[-1]
    inside = (x >= lo) & (x <= hi)
    if np.any(inside):
        xi = x[inside]
        spans = _find_spans(t, knots.size, xi)
        # vectorized de Boor across all inside points
        values_nz = np.zeros((xi.size, _DEGREE + 1))
        values_nz[:, 0] = 1.0
        left = np.zeros((xi.size, _DEGREE + 1))
        right = np.zeros((xi.size, _DEGREE + 1))
        for d in range(1, _DEGREE + 1):
            left[:, d] = xi - t[spans + 1 - d]
            right[:, d] = t[spans + d] - xi
            saved = np.zeros(xi.size)
            for r in range(d):
                temp = values_nz[:, r] / (right[:, r + 1] + left[:, d - r])
                values_nz[:, r] = saved + right[:, r + 1] * temp
                saved = left[:, d - r] * temp
            values_nz[:, d] = saved
        cols = spans[:, None] - _DEGREE + np.arange(_DEGREE + 1)[None, :]
        rows_idx = np.nonzero(inside)[0]
        basis[rows_idx[:, None], cols] = values_nz

    below = x < lo
    if np.any(below):
        row, slope = _boundary_row_and_slope(t, n_basis, _DEGREE, lo)
        basis[below] = row[None, :] + (x[below, None] - lo) * slope[None, :]
    above = x > hi
    if np.any(above):
        row, slope = _boundary_row_and_slope(t, n_basis, knots.size + 1, hi)
        basis[above] = row[None, :] + (x[above, None] - hi) * slope[None, :]

    return basis


def evaluate_smooth(term: SmoothTerm, values: Sequence[float]) -> np.ndarray:
    """Evaluate one fitted smooth at the given feature values."""
    basis = build_spline_basis(values, term.knots)
    return basis @ np.asarray(term.coefficients)


# ---------------------------------------------------------------------------
# Fitting


def _term_knots(feature: np.ndarray, interior: int) -> np.ndarray:
    lo = float(feature.min())
    hi = float(feature.max())
    if lo == hi:
        # constant feature: widen artificially so the term is estimable
        # (it will fit a constant, centered away to zero)
        logger.warning("constant feature: widening knot range around %g", lo)
        return np.array([lo - 0.5, lo + 0.5])
    quantiles = np.linspace(0.0, 1.0, interior + 2)[1:-1]
    inner = np.quantile(feature, quantiles)
    knots = np.unique(np.concatenate([[lo], inner, [hi]]))
    return knots


def _second_difference_penalty(n_coef: int) -> np.ndarray:
    if n_coef < 3:
        return np.zeros((n_coef, n_coef))
    d2 = np.zeros((n_coef - 2, n_coef))
    for i in range(n_coef - 2):
        d2[i, i : i + 3] = (1.0, -2.0, 1.0)
    return d2.T @ d2


def _assign_folds(groups: np.ndarray, n_folds: int, seed: int) -> np.ndarray:
    unique = np.sort(np.unique(groups))
    rng = np.random.default_rng(seed)
    order = rng.permutation(unique.size)
    fold_of_group = {int(unique[pos]): i % n_folds for i, pos in enumerate(order)}
    return np.array([fold_of_group[int(g)] for g in groups])


def _solve_penalized(
    design: np.ndarray,
    y: np.ndarray,
    term_slices: list[slice],
    penalties: list[np.ndarray],
    lambdas: Sequence[float],
) -> np.ndarray:
    """Solve (X'X/n + blockdiag(0, lambda_i P_i + ridge)) beta = X'y/n."""
    n = design.shape[0]
    gram = design.T @ design / n
    rhs = design.T @ y / n
    return _solve_from_gram(gram, rhs, term_slices, penalties, lambdas)


def _solve_from_gram(
    gram: np.ndarray,
    rhs: np.ndarray,
    term_slices: list[slice],
    penalties: list[np.ndarray],
    lambdas: Sequence[float],
) -> np.ndarray:
    m = gram.copy()
    for sl, pen, lam in zip(term_slices, penalties, lambdas):
        m[sl, sl] += lam * pen
        idx = np.arange(sl.start, sl.stop)
        m[idx, idx] += _RIDGE
    try:
        factor = cho_factor(m, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise TrainingDataError(f"penalized system is not positive definite: {exc}") from exc
    return cho_solve(factor, rhs, check_finite=False)


def fit_gam(rows: Sequence[FeatureRow], options: FitOptions | None = None) -> GamModel:
    """Fit the four-term additive model by penalized least squares.

    Per-term smoothing parameters are chosen from ``options.lambda_grid``
    by minimizing pooled k-fold cross-validation MSE, with rows grouped by
    prompt so rank-coupled rows never straddle a fold boundary. After the
    final fit each term is centered over the training feature values and
    the centering is absorbed into the intercept. Deterministic for fixed
    rows, options and seed.
    """
    if options is None:
        options = FitOptions()
    if any(r.target_percentile is None for r in rows):
        raise TrainingDataError("all training rows must carry a target percentile")

    features = np.array([r.features() for r in rows], dtype=np.float64)
    y = np.array([r.target_percentile for r in rows], dtype=np.float64)
    n_rows = features.shape[0]

    knot_sets = [_term_knots(features[:, i], options.knots) for i in range(4)]
    bases = [build_spline_basis(features[:, i], k) for i, k in enumerate(knot_sets)]
    total_basis = sum(b.shape[1] for b in bases)
    if n_rows < 10 * total_basis:
        raise TrainingDataError(
            f"too few rows: {n_rows} < 10 x total basis size ({10 * total_basis}); "
            "reduce knots or add training prompts"
        )

    design = np.hstack([np.ones((n_rows, 1))] + bases)
    term_slices = []
    start = 1
    for b in bases:
        term_slices.append(slice(start, start + b.shape[1]))
        start += b.shape[1]
    penalties = [_second_difference_penalty(b.shape[1]) for b in bases]

    groups = np.array(
        [r.group if r.group is not None else -(i + 1) for i, r in enumerate(rows)]
    )
    n_groups = np.unique(groups).size
    n_folds = min(options.cv_folds, n_groups)
    if n_folds < 2:
        raise TrainingDataError("cross-validation needs at least 2 distinct prompt groups")
    fold_ids = _assign_folds(groups, n_folds, options.seed)

    combos = list(itertools.product(options.lambda_grid, repeat=4))
    sse = np.zeros(len(combos))
    for fold in range(n_folds):
        val_mask = fold_ids == fold
        x_tr, y_tr = design[~val_mask], y[~val_mask]
        x_val, y_val = design[val_mask], y[val_mask]
        n_tr = x_tr.shape[0]
        gram = x_tr.T @ x_tr / n_tr
        rhs = x_tr.T @ y_tr / n_tr
        for ci, lambdas in enumerate(combos):
            beta = _solve_from_gram(gram, rhs, term_slices, penalties, lambdas)
            residual = y_val - x_val @ beta
            sse[ci] += float(residual @ residual)

    best = int(np.argmin(sse))
    best_lambdas = combos[best]
    cv_rmse = float(np.sqrt(sse[best] / n_rows))
    logger.info("chosen lambdas %s, CV RMSE %.4f", best_lambdas, cv_rmse)

    beta = _solve_penalized(design, y, term_slices, penalties, best_lambdas)

    beta0 = float(beta[0])
    terms = []
    for i, (sl, knots) in enumerate(zip(term_slices, knot_sets)):
        coef = beta[sl].copy()
        centering = float(np.mean(bases[i] @ coef))
        # partition of unity lets a constant shift move into the intercept
        coef -= centering
        beta0 += centering
        terms.append(
            SmoothTerm(
                knots=tuple(float(k) for k in knots),
                coefficients=tuple(float(c) for c in coef),
                feature_min=float(knots[0]),
                feature_max=float(knots[-1]),
            )
        )

    return GamModel(
        beta0=beta0,
        terms=tuple(terms),
        lambdas=tuple(float(l) for l in best_lambdas),
        training_meta=TrainingMeta(
            row_count=n_rows,
            cv_rmse=cv_rmse,
            cv_folds=n_folds,
            seed=options.seed,
        ),
    )


def predict_percentile(model: GamModel, a: float, m: float, d_score: float, p: float):
    """Raw additive prediction; not clamped (display layers clamp to [0, 100])."""
    inputs = [a, m, d_score, p]
    scalar = all(np.ndim(v) == 0 for v in inputs)
    result = model.beta0 + sum(
        evaluate_smooth(term, np.atleast_1d(np.asarray(v, dtype=np.float64)))
        for term, v in zip(model.terms, inputs)
    )
    return float(result[0]) if scalar else result


def export_partial_dependence(
    model: GamModel, term_index: int, grid_size: int = 100
) -> list[tuple[float, float]]:
    """Grid over the term's training range with the smooth evaluated at each point."""
    if not 0 <= term_index < len(model.terms):
        raise ValueError(f"term index {term_index} out of range")
    if grid_size < 2:
        raise ValueError("grid size must be >= 2")
    term = model.terms[term_index]
    grid = np.linspace(term.feature_min, term.feature_max, grid_size)
    values = evaluate_smooth(term, grid)
    return [(float(x), float(s)) for x, s in zip(grid, values)]


# ---------------------------------------------------------------------------
# Serialization

_FORMAT_NAME = "tokenlens-gam"
_FORMAT_VERSION = 1


def save_model(model: GamModel, path: str) -> None:
    """Write the model as a self-describing JSON document with stable layout."""
    document = {
        "format": _FORMAT_NAME,
        "version": _FORMAT_VERSION,
        "beta0": model.beta0,
        "terms": [
            {
                "feature": name,
                "knots": list(term.knots),
                "coefficients": list(term.coefficients),
                "lambda": lam,
                "feature_min": term.feature_min,
                "feature_max": term.feature_max,
            }
            for name, term, lam in zip(TERM_NAMES, model.terms, model.lambdas)
        ],
        "training": {
            "row_count": model.training_meta.row_count,
            "cv_rmse": model.training_meta.cv_rmse,
            "cv_folds": model.training_meta.cv_folds,
            "seed": model.training_meta.seed,
        },
    }
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(dumps_stable(document))
        handle.write("\n")


def _require(mapping, key, kind, path):
    if not isinstance(mapping, dict) or key not in mapping:
        raise ModelFormatError("missing field", f"{path}.{key}" if path else key)
    value = mapping[key]
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ModelFormatError("expected a number", f"{path}.{key}" if path else key)
        return float(value)
    if not isinstance(value, kind):
        raise ModelFormatError(
            f"expected {kind.__name__}", f"{path}.{key}" if path else key
        )
    return value


def _float_list(values, path):
    if not isinstance(values, list):
        raise ModelFormatError("expected a list", path)
    out = []
    for i, v in enumerate(values):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ModelFormatError("expected a number", f"{path}[{i}]")
        out.append(float(v))
    return out


def load_model(path: str) -> GamModel:
    """Read a model written by :func:`save_model`."""
    with open(path, encoding="utf-8") as handle:
        text = handle.read()
    try:
        document = loads(text)
    except ValueError as exc:
        raise ModelFormatError(f"not valid JSON: {exc}") from exc

    if _require(document, "format", str, "") != _FORMAT_NAME:
        raise ModelFormatError(f"not a {_FORMAT_NAME} file", "format")
    if _require(document, "version", int, "") != _FORMAT_VERSION:
        raise ModelFormatError("unsupported version", "version")
    beta0 = _require(document, "beta0", float, "")

    raw_terms = _require(document, "terms", list, "")
    if len(raw_terms) != 4:
        raise ModelFormatError("expected exactly 4 terms", "terms")
    terms = []
    lambdas = []
    for i, raw in enumerate(raw_terms):
        path_i = f"terms[{i}]"
        knots = _float_list(_require(raw, "knots", list, path_i), f"{path_i}.knots")
        coefficients = _float_list(
            _require(raw, "coefficients", list, path_i), f"{path_i}.coefficients"
        )
        lambdas.append(_require(raw, "lambda", float, path_i))
        try:
            terms.append(
                SmoothTerm(
                    knots=tuple(knots),
                    coefficients=tuple(coefficients),
                    feature_min=_require(raw, "feature_min", float, path_i),
                    feature_max=_require(raw, "feature_max", float, path_i),
                )
            )
        except ValueError as exc:
            raise ModelFormatError(str(exc), path_i) from exc

    training = _require(document, "training", dict, "")
    meta = TrainingMeta(
        row_count=int(_require(training, "row_count", int, "training")),
        cv_rmse=_require(training, "cv_rmse", float, "training"),
        cv_folds=int(_require(training, "cv_folds", int, "training")),
        seed=int(_require(training, "seed", int, "training")),
    )
    return GamModel(
        beta0=beta0, terms=tuple(terms), lambdas=tuple(lambdas), training_meta=meta
    )
