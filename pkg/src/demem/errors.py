"""Exception types shared across the library.

Parameter and input validation raises plain ``ValueError`` (or the
``FormatError``/``ConfigError`` subclasses below, which the CLI maps to a
usage-error exit code). Conditions that arise at run time on valid inputs
raise ``RuntimeError`` subclasses.
"""


class FormatError(ValueError):
    """A binary container or manifest is corrupt or has the wrong magic."""


class ConfigError(ValueError):
    """A run configuration document failed schema validation."""


class ScheduleError(ValueError):
    """A noise schedule cannot support the requested reverse step."""


class EmptyMaskError(RuntimeError):
    """Mask intersection produced no active cells, even after the fallback."""


class NoQueryError(RuntimeError):
    """Every prompt word was removed by the stopword/punctuation filter."""


class NoCandidatesError(RuntimeError):
    """Candidate scoring was asked to select from an empty candidate list."""


class RetrievalError(RuntimeError):
    """All configured candidate sources failed."""


class UndefinedMetricError(RuntimeError):
    """A similarity metric is undefined for the given inputs (zero norm)."""
