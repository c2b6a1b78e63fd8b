"""Prompt text -> normalized token sequence.

Tokenization splits on Unicode whitespace and strips leading/trailing
punctuation from each fragment; punctuation inside a token (apostrophes,
hyphens) survives, which keeps forms like "don't" aligned with word-level
embedding vocabularies. Stopwords are only ever *flagged*, never removed:
downstream scoring runs on every token and display layers decide what to
de-emphasize.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field

from .errors import EmptyPromptError

__all__ = [
    "Token",
    "PreprocessConfig",
    "tokenize",
    "builtin_stopwords",
    "load_stopword_file",
]


# Core function words: articles, auxiliary/copular verbs, generic
# prepositions, pronouns and a few high-frequency connectives. Content
# words never belong here.
_BUILTIN_STOPWORDS = frozenset(
    """
    the a an
    is are was were am be been being
    of in to for on at by with from as into onto upon
    and or but nor so yet
    this that these those
    it its he she his her him they them their we us our you your i me my
    do does did done has have had having
    will would can could shall should may might must
    not no nor
    there here when where which who whom whose what why how
    than then too very just also
    """.split()
)


def builtin_stopwords() -> frozenset[str]:
    """Return the built-in normalized stopword set."""
    return _BUILTIN_STOPWORDS


def _is_punctuation(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def _strip_punctuation(fragment: str) -> str:
    """Strip leading/trailing punctuation, keeping interior characters."""
    start = 0
    end = len(fragment)
    while start < end and _is_punctuation(fragment[start]):
        start += 1
    while end > start and _is_punctuation(fragment[end - 1]):
        end -= 1
    return fragment[start:end]


@dataclass(frozen=True)
class Token:
    """One tokenized unit of a prompt.

    ``surface`` is the original text span, ``normalized`` the lowercased
    lookup form used against the embedding vocabulary, ``index`` the
    zero-based position within the prompt.
    """

    surface: str
    normalized: str
    index: int
    is_stopword: bool = False


@dataclass(frozen=True)
class PreprocessConfig:
    """Tokenization and normalization switches.

    ``stemmer`` is a reserved hook (callable applied to normalized forms);
    no stemmer ships with the package because word-level embedding
    vocabularies contain inflected forms already.
    """

    lowercase: bool = True
    strip_punctuation: bool = True
    mark_stopwords: bool = True
    stopword_list: frozenset[str] = field(default_factory=builtin_stopwords)
    stemmer: object = None

    def __post_init__(self):
        # Keep the stopword list normalized under this config so that
        # membership tests against normalized tokens are meaningful.
        normalized = frozenset(self.normalize(w) for w in self.stopword_list)
        normalized = frozenset(w for w in normalized if w)
        object.__setattr__(self, "stopword_list", normalized)

    def normalize(self, fragment: str) -> str:
        """Apply this config's normalization to one whitespace fragment."""
        if self.strip_punctuation:
            fragment = _strip_punctuation(fragment)
        if self.lowercase:
            fragment = fragment.lower()
        if self.stemmer is not None:
            fragment = self.stemmer(fragment)
        return fragment


def tokenize(text: str, config: PreprocessConfig | None = None) -> list[Token]:
    """Split ``text`` into an ordered list of normalized tokens.

    Fragments that are empty after punctuation stripping are dropped, so
    indices stay contiguous from 0. Raises :class:`EmptyPromptError` when
    nothing survives; per-token scores are undefined for an empty prompt.
    """
    if config is None:
        config = PreprocessConfig()

    tokens: list[Token] = []
    for fragment in text.split():
        if config.strip_punctuation:
            surface = _strip_punctuation(fragment)
        else:
            surface = fragment
        if not surface:
            continue
        normalized = config.normalize(fragment)
        if not normalized:
            continue
        is_stop = config.mark_stopwords and normalized in config.stopword_list
        tokens.append(
            Token(
                surface=surface,
                normalized=normalized,
                index=len(tokens),
                is_stopword=is_stop,
            )
        )

    if not tokens:
        raise EmptyPromptError("prompt contains no tokens after tokenization")
    return tokens


def load_stopword_file(path: str) -> frozenset[str]:
    """Read a stopword list: UTF-8, one word per line, '#' lines ignored."""
    words: set[str] = set()
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            word = line.strip()
            if not word or word.startswith("#"):
                continue
            words.add(word)
    return frozenset(words)
