"""Exception hierarchy shared across the toolkit.

Every error class carries a short machine-parseable slug and the exit code the
CLI uses for it, so scripted callers can branch on failure class without
scraping messages.
"""


class UpliftError(Exception):
    """Base class for all toolkit errors."""

    slug = "error"
    exit_code = 1


class ParseError(UpliftError):
    """Malformed line in a data file; message carries the 1-based line number."""

    slug = "parse-error"
    exit_code = 3

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(UpliftError):
    """Structurally valid input whose dimensions or invariants are wrong."""

    slug = "schema-error"
    exit_code = 3


class TaxonomyError(UpliftError):
    """Treatment category outside the configured category map."""

    slug = "taxonomy-error"
    exit_code = 3


class SizeError(UpliftError):
    """Dataset too small (or a split too degenerate) for the requested operation."""

    slug = "size-error"
    exit_code = 3


class ConfigError(UpliftError):
    """Invalid or inconsistent configuration values."""

    slug = "config-error"
    exit_code = 4


class CalibrationError(UpliftError):
    """Generator marginal targets that cannot be met; names the violated constraint."""

    slug = "calibration-error"
    exit_code = 4


class TrainingError(UpliftError):
    """Training preconditions violated (e.g. a single-arm training set)."""

    slug = "training-error"
    exit_code = 5


class NumericHealthError(UpliftError):
    """NaN or Inf produced by a numeric kernel."""

    slug = "numeric-health-error"
    exit_code = 6
