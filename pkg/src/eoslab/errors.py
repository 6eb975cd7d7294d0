"""Exception hierarchy shared across the package."""


class EoslabError(Exception):
    """Base class for all package errors."""

    exit_code = 1
    error_class = "error"


class ConfigError(EoslabError):
    """Invalid or inconsistent configuration."""

    exit_code = 2
    error_class = "config"


class GenerationError(EoslabError):
    """Caption generation hit a vocabulary gap or malformed scene."""

    exit_code = 3
    error_class = "generation"


class LengthError(EoslabError):
    """Sequence exceeds the model's maximum length."""

    exit_code = 3
    error_class = "length"


class AlignmentError(EoslabError):
    """Parallel lists (captions/scenes/scores) do not line up."""

    exit_code = 3
    error_class = "alignment"


class NumericError(EoslabError):
    """Non-finite value where a finite one is required."""

    exit_code = 4
    error_class = "numeric"


class TrainingDivergence(NumericError):
    """Training loss became non-finite."""

    exit_code = 4
    error_class = "divergence"
