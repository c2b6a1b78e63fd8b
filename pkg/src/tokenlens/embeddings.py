"""Embedding table loading, token resolution and prompt aggregation.

Vectors are float64 numpy arrays. The table keeps all vectors in one
contiguous (vocab x dim) matrix marked read-only; lookups hand out views
into it, so the immutability contract is enforced by numpy itself.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmbeddingParseError, EmptyPromptError, OovError
from .preprocess import Token

__all__ = [
    "EmbeddingTable",
    "OovPolicy",
    "Provenance",
    "ResolvedToken",
    "load_glove",
    "resolve",
    "aggregate",
]

logger = logging.getLogger(__name__)

Vector = np.ndarray


class OovPolicy(Enum):
    """How to treat tokens missing from the embedding vocabulary."""

    ZERO = "zero"
    SKIP = "skip"
    ERROR = "error"


class Provenance(Enum):
    IN_VOCAB = "in_vocab"
    OOV_ZERO = "oov_zero"
    OOV_SKIPPED = "oov_skipped"


@dataclass(frozen=True)
class ResolvedToken:
    token: Token
    vector: Vector
    provenance: Provenance


class EmbeddingTable:
    """Immutable vocabulary -> vector map with a fixed dimension."""

    def __init__(self, vectors: Mapping[str, Sequence[float]], source_id: str = "in-memory"):
        if not vectors:
            raise ValueError("embedding table must contain at least one vector")
        words = list(vectors.keys())
        matrix = np.asarray([vectors[w] for w in words], dtype=np.float64)
        if matrix.ndim != 2:
            raise ValueError("all vectors must share one dimension")
        if not np.isfinite(matrix).all():
            raise ValueError("embedding vectors must be finite")
        self._index = {w: i for i, w in enumerate(words)}
        matrix.setflags(write=False)
        self._matrix = matrix
        self._source_id = source_id

    @classmethod
    def _from_matrix(cls, index: dict[str, int], matrix: np.ndarray, source_id: str) -> "EmbeddingTable":
        table = object.__new__(cls)
        if not np.isfinite(matrix).all():
            raise ValueError("embedding vectors must be finite")
        matrix.setflags(write=False)
        table._index = index
        table._matrix = matrix
        table._source_id = source_id
        return table

    @property
    def dim(self) -> int:
        return self._matrix.shape[1]

    @property
    def source_id(self) -> str:
        return self._source_id

    def __len__(self) -> int:
        return self._matrix.shape[0]

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def get(self, word: str) -> Vector | None:
        """Return the word's vector (read-only view) or None if absent."""
        row = self._index.get(word)
        if row is None:
            return None
        return self._matrix[row]

    def vocabulary(self) -> Iterable[str]:
        return self._index.keys()


def _looks_like_header(parts: list[str]) -> bool:
    # word2vec-style "count dim" first line
    if len(parts) != 2:
        return False
    try:
        int(parts[0]), int(parts[1])
    except ValueError:
        return False
    return True


def load_glove(path: str) -> EmbeddingTable:
    """Load a GloVe-format text file: one "token v1 ... vd" line per word.

    The dimension is inferred from the first data line; later lines with a
    different component count raise :class:`EmbeddingParseError` naming the
    line. Duplicate tokens resolve last-wins with a logged warning. The
    table's ``source_id`` records path plus content hash for provenance.
    """
    with open(path, "rb") as handle:
        raw = handle.read()
    digest = hashlib.sha256(raw).hexdigest()
    text = raw.decode("utf-8")

    index: dict[str, int] = {}
    rows: list[np.ndarray] = []
    dim: int | None = None

    for line_number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if dim is None and line_number == 1 and _looks_like_header(parts):
            logger.info("skipping header line in %s", path)
            continue
        word, values = parts[0], parts[1:]
        if not values:
            raise EmbeddingParseError("no vector components", line_number)
        try:
            vector = np.array(values, dtype=np.float64)
        except ValueError:
            raise EmbeddingParseError(
                f"unparseable float in entry for {word!r}", line_number
            ) from None
        if dim is None:
            dim = vector.shape[0]
        elif vector.shape[0] != dim:
            raise EmbeddingParseError(
                f"expected {dim} components, found {vector.shape[0]}", line_number
            )
        if word in index:
            logger.warning("duplicate token %r at line %d: keeping last", word, line_number)
            rows[index[word]] = vector
        else:
            index[word] = len(rows)
            rows.append(vector)

    if not rows:
        raise EmbeddingParseError(f"no embedding entries in {path}")

    matrix = np.vstack(rows)
    source_id = f"{path} sha256:{digest}"
    table = EmbeddingTable._from_matrix(index, matrix, source_id)
    logger.info("loaded %d vectors of dim %d from %s", len(table), table.dim, path)
    return table


def resolve(
    table: EmbeddingTable,
    tokens: Sequence[Token],
    policy: OovPolicy = OovPolicy.ZERO,
) -> list[ResolvedToken]:
    """Map tokens to vectors, applying the OOV policy.

    ZERO keeps OOV tokens with an all-zeros vector, SKIP drops them, ERROR
    aborts listing every missing token. Every OOV event is logged with the
    token's surface form.
    """
    if not tokens:
        raise EmptyPromptError("cannot resolve an empty token sequence")

    oov = [t for t in tokens if t.normalized not in table]
    for t in oov:
        logger.warning("out-of-vocabulary token %r (normalized %r)", t.surface, t.normalized)
    if oov and policy is OovPolicy.ERROR:
        raise OovError([t.surface for t in oov])

    zero = np.zeros(table.dim, dtype=np.float64)
    zero.setflags(write=False)
    resolved: list[ResolvedToken] = []
    for t in tokens:
        vector = table.get(t.normalized)
        if vector is not None:
            resolved.append(ResolvedToken(t, vector, Provenance.IN_VOCAB))
        elif policy is OovPolicy.ZERO:
            resolved.append(ResolvedToken(t, zero, Provenance.OOV_ZERO))
        # SKIP: token dropped, already logged

    if not resolved:
        raise EmptyPromptError("prompt is empty after OOV filtering")
    return resolved


def aggregate(resolved: Sequence[ResolvedToken]) -> Vector:
    """Componentwise sum of the resolved vectors, accumulated in token order."""
    if not resolved:
        raise EmptyPromptError("cannot aggregate an empty token sequence")
    dim = resolved[0].vector.shape[0]
    total = np.zeros(dim, dtype=np.float64)
    for item in resolved:
        if item.vector.shape[0] != dim:
            raise ValueError(
                f"dimension mismatch: expected {dim}, got {item.vector.shape[0]}"
            )
        total += item.vector
    return total
