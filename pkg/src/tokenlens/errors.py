"""Exception hierarchy shared across the package.

Errors fall into two broad categories that the CLI maps onto exit codes:
``DataError`` for malformed or unusable input data (embeddings files, model
files, corpora, OOV failures) and ``DegenerateInputError`` for inputs that
are structurally valid but make the analysis undefined (empty prompts,
zero-norm aggregates).
"""


class TokenlensError(Exception):
    """Base class for all package-specific errors."""


class DataError(TokenlensError):
    """Input data could not be parsed or used."""


class DegenerateInputError(TokenlensError):
    """Input is well-formed but the analysis is undefined for it."""


class EmptyPromptError(DegenerateInputError):
    """Prompt produced no tokens after tokenization / OOV filtering."""


class DegeneratePromptError(DegenerateInputError):
    """The aggregate prompt embedding has zero norm."""


class EmbeddingParseError(DataError):
    """An embeddings file line could not be parsed."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class OovError(DataError):
    """Out-of-vocabulary tokens encountered under the Error policy."""

    def __init__(self, oov_tokens: list[str]):
        super().__init__(
            "out-of-vocabulary tokens: " + ", ".join(repr(t) for t in oov_tokens)
        )
        self.oov_tokens = list(oov_tokens)


class ModelFormatError(DataError):
    """A serialized model file is malformed.

    ``field_path`` names the offending location, e.g. ``terms[2].knots``.
    """

    def __init__(self, message: str, field_path: str = ""):
        if field_path:
            message = f"{field_path}: {message}"
        super().__init__(message)
        self.field_path = field_path


class TrainingDataError(DataError):
    """Training rows are missing, inconsistent, or too few to fit."""
