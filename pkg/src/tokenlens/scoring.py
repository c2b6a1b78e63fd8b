"""Leave-one-token-out perturbation scoring.

For each token the prompt's aggregate vector is compared against the
aggregate with that token's vector subtracted. Three complementary scores
come out of the comparison:

* angular: (1 - cos(theta)) / 2 between original and perturbed aggregates,
  in [0, 1] -- shift in semantic direction;
* magnitude: absolute relative change of the Euclidean norm, in [0, 1]
  (clamped) -- change in semantic intensity;
* dimensional: sum over dimensions of |token component| times a
  sign-contrast weight that up-weights components opposing the aggregate's
  sign -- contribution across latent axes, unbounded above.

The composite importance score is their product, so weakness in any one
aspect drags the whole score down.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .embeddings import (
    EmbeddingTable,
    OovPolicy,
    ResolvedToken,
    Vector,
    aggregate,
    resolve,
)
from .errors import DegeneratePromptError
from .preprocess import PreprocessConfig, Token, tokenize

__all__ = [
    "ScoreBreakdown",
    "ScoringConfig",
    "PromptAnalysis",
    "perturbed_embedding",
    "angular_score",
    "magnitude_score",
    "dimensional_score",
    "composite_score",
    "analyze_prompt",
    "config_digest",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoringConfig:
    """Weights for the sign-contrast function g plus the magnitude clamp.

    g returns ``opposite_sign_weight`` when the token component and the
    aggregate component have strictly opposite signs, ``same_sign_weight``
    when they agree, and ``zero_sign_weight`` when either is exactly zero.
    ``opposite_sign_weight >= same_sign_weight`` keeps contrast-providing
    components at least as heavy as reinforcing ones.
    """

    opposite_sign_weight: float = 2.0
    same_sign_weight: float = 1.0
    zero_sign_weight: float = 1.0
    magnitude_clamp: bool = True

    def __post_init__(self):
        if self.opposite_sign_weight < self.same_sign_weight:
            raise ValueError(
                "opposite_sign_weight must be >= same_sign_weight "
                f"({self.opposite_sign_weight} < {self.same_sign_weight})"
            )


@dataclass(frozen=True)
class ScoreBreakdown:
    """Per-token scores; ``composite`` is exactly the product of the three."""

    angular: float
    magnitude: float
    dimensional: float
    composite: float
    cos_theta: float


@dataclass(frozen=True)
class PromptAnalysis:
    tokens: tuple[Token, ...]
    resolved: tuple[ResolvedToken, ...]
    e_orig: Vector
    breakdowns: tuple[ScoreBreakdown, ...]
    table_provenance: str
    config_digest: str


def perturbed_embedding(e_orig: Vector, e_tok: Vector) -> Vector:
    """Aggregate with one token's vector removed: componentwise difference."""
    if e_orig.shape != e_tok.shape:
        raise ValueError(f"dimension mismatch: {e_orig.shape} vs {e_tok.shape}")
    return e_orig - e_tok


def angular_score(e_orig: Vector, e_pert: Vector) -> tuple[float, float]:
    """Directional-change score and the underlying cosine.

    Returns ``((1 - cos) / 2, cos)`` with the cosine clamped to [-1, 1]
    against rounding overshoot. If either vector has zero norm the cosine
    is undefined; by convention that degenerate geometry counts as maximal
    directional change: ``(1.0, -1.0)``. (For a single-token prompt the
    perturbed aggregate is the zero vector, so removal of the only token
    scores as maximal disruption.)
    """
    if e_orig.shape != e_pert.shape:
        raise ValueError(f"dimension mismatch: {e_orig.shape} vs {e_pert.shape}")
    norm_orig = float(np.linalg.norm(e_orig))
    norm_pert = float(np.linalg.norm(e_pert))
    if norm_orig == 0.0 or norm_pert == 0.0:
        return 1.0, -1.0
    cos_theta = float(np.dot(e_orig, e_pert)) / (norm_orig * norm_pert)
    cos_theta = min(1.0, max(-1.0, cos_theta))
    return (1.0 - cos_theta) / 2.0, cos_theta


def magnitude_score(
    e_orig: Vector, e_pert: Vector, config: ScoringConfig | None = None
) -> float:
    """Absolute relative change of the aggregate norm, clamped to [0, 1].

    The raw ratio can exceed 1 when a removed token's vector dominates and
    opposes the remainder; the clamp keeps the documented [0, 1] range and
    logs when it fires. A zero-norm original aggregate makes the score
    undefined for the whole prompt.
    """
    if config is None:
        config = ScoringConfig()
    if e_orig.shape != e_pert.shape:
        raise ValueError(f"dimension mismatch: {e_orig.shape} vs {e_pert.shape}")
    norm_orig = float(np.linalg.norm(e_orig))
    if norm_orig == 0.0:
        raise DegeneratePromptError("aggregate prompt embedding has zero norm")
    score = abs(norm_orig - float(np.linalg.norm(e_pert))) / norm_orig
    if config.magnitude_clamp and score > 1.0:
        logger.info("magnitude score %.6f clamped to 1.0", score)
        score = 1.0
    return score


def dimensional_score(
    e_orig: Vector, e_tok: Vector, config: ScoringConfig | None = None
) -> float:
    """Sign-contrast weighted L1 mass of the token's vector.

    Each component contributes |e_tok[j]| times g(sign(e_orig[j]),
    sign(e_tok[j])); exact zeros (e.g. OOV zero vectors) take the
    zero-involved branch.
    """
    if config is None:
        config = ScoringConfig()
    if e_orig.shape != e_tok.shape:
        raise ValueError(f"dimension mismatch: {e_orig.shape} vs {e_tok.shape}")
    sign_product = np.sign(e_orig) * np.sign(e_tok)
    weights = np.where(
        sign_product < 0,
        config.opposite_sign_weight,
        np.where(sign_product > 0, config.same_sign_weight, config.zero_sign_weight),
    )
    return float(np.dot(np.abs(e_tok), weights))


def composite_score(angular: float, magnitude: float, dimensional: float) -> float:
    """Multiplicative combination: zero in any factor zeroes the whole score."""
    return angular * magnitude * dimensional


def _score_token(
    e_orig: Vector, norm_orig: float, e_tok: Vector, config: ScoringConfig
) -> ScoreBreakdown:
    # Shared kernel for sequential and parallel paths: identical arithmetic
    # per token guarantees identical output regardless of execution mode.
    e_pert = e_orig - e_tok
    norm_pert = float(np.linalg.norm(e_pert))
    if norm_pert == 0.0:
        angular, cos_theta = 1.0, -1.0
    else:
        cos_theta = float(np.dot(e_orig, e_pert)) / (norm_orig * norm_pert)
        cos_theta = min(1.0, max(-1.0, cos_theta))
        angular = (1.0 - cos_theta) / 2.0
    magnitude = abs(norm_orig - norm_pert) / norm_orig
    if config.magnitude_clamp and magnitude > 1.0:
        magnitude = 1.0
    dimensional = dimensional_score(e_orig, e_tok, config)
    return ScoreBreakdown(
        angular=angular,
        magnitude=magnitude,
        dimensional=dimensional,
        composite=angular * magnitude * dimensional,
        cos_theta=cos_theta,
    )


def config_digest(
    pre_cfg: PreprocessConfig,
    score_cfg: ScoringConfig,
    policy: OovPolicy,
) -> str:
    """Stable short hash of all analysis-affecting configuration values."""
    parts = [
        f"lowercase={pre_cfg.lowercase}",
        f"strip_punctuation={pre_cfg.strip_punctuation}",
        f"mark_stopwords={pre_cfg.mark_stopwords}",
        "stopwords=" + ",".join(sorted(pre_cfg.stopword_list)),
        f"stemmer={pre_cfg.stemmer is not None}",
        f"opposite_sign_weight={score_cfg.opposite_sign_weight!r}",
        f"same_sign_weight={score_cfg.same_sign_weight!r}",
        f"zero_sign_weight={score_cfg.zero_sign_weight!r}",
        f"magnitude_clamp={score_cfg.magnitude_clamp}",
        f"oov={policy.value}",
    ]
    return hashlib.sha256(";".join(parts).encode("utf-8")).hexdigest()[:12]


def analyze_prompt(
    text: str,
    table: EmbeddingTable,
    pre_cfg: PreprocessConfig | None = None,
    score_cfg: ScoringConfig | None = None,
    policy: OovPolicy = OovPolicy.ZERO,
    parallel: bool = False,
) -> PromptAnalysis:
    """Run the full per-token pipeline on one prompt.

    Tokenizes, resolves against the table, aggregates, then scores each
    token by removing its vector from the aggregate. Work is linear in
    token count and embedding dimension. With ``parallel=True`` tokens are
    scored across worker threads into per-token slots; output is identical
    to sequential execution.
    """
    if pre_cfg is None:
        pre_cfg = PreprocessConfig()
    if score_cfg is None:
        score_cfg = ScoringConfig()

    tokens = tokenize(text, pre_cfg)
    resolved = resolve(table, tokens, policy)
    e_orig = aggregate(resolved)
    norm_orig = float(np.linalg.norm(e_orig))
    if norm_orig == 0.0:
        raise DegeneratePromptError("aggregate prompt embedding has zero norm")

    if parallel and len(resolved) > 1:
        breakdowns: list[ScoreBreakdown | None] = [None] * len(resolved)

        def work(k: int) -> None:
            breakdowns[k] = _score_token(e_orig, norm_orig, resolved[k].vector, score_cfg)

        with ThreadPoolExecutor() as pool:
            list(pool.map(work, range(len(resolved))))
        scored = tuple(breakdowns)  # type: ignore[arg-type]
    else:
        scored = tuple(
            _score_token(e_orig, norm_orig, item.vector, score_cfg) for item in resolved
        )

    return PromptAnalysis(
        tokens=tuple(tokens),
        resolved=tuple(resolved),
        e_orig=e_orig,
        breakdowns=scored,
        table_provenance=table.source_id,
        config_digest=config_digest(pre_cfg, score_cfg, policy),
    )
