"""Exception types shared across the package."""


class LatentFlowError(Exception):
    """Base class for all package errors."""


class ConfigError(LatentFlowError, ValueError):
    """Invalid configuration or input sizes (CLI exit code 2)."""


class ContractError(LatentFlowError, ValueError):
    """A precondition of an operation was violated by the caller."""


class DimensionError(ContractError):
    """Tensor shapes do not conform."""


class FormatError(LatentFlowError, ValueError):
    """A file on disk does not follow the expected binary layout."""


class UndefinedMetricError(LatentFlowError, ValueError):
    """A metric was requested over an empty set of valid pixels."""


class TrainingError(LatentFlowError, RuntimeError):
    """Training diverged (non-finite loss)."""
