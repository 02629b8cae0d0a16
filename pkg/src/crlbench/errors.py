"""Exception hierarchy shared across the package."""


class CrlBenchError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CrlBenchError):
    """Invalid configuration values or inconsistent experiment setup."""


class UsageError(CrlBenchError):
    """An operation was called with arguments violating its contract."""


class IngestionError(CrlBenchError):
    """A manifest or feature file could not be loaded."""


class IntegrityError(CrlBenchError):
    """A persisted snapshot does not match the expected architecture."""


class EvaluationError(CrlBenchError):
    """An evaluation protocol cannot be run on the given data."""


class NumericGuardError(CrlBenchError):
    """Numerically degenerate input (zero-norm rows, non-finite values)."""


class TrainingDivergedError(CrlBenchError):
    """A training step produced a non-finite loss or gradient."""
