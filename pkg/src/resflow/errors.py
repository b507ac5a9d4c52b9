"""Exception hierarchy; each class maps onto a CLI exit code."""


class ResFlowError(Exception):
    exit_code = 1


class ConfigError(ResFlowError):
    """Invalid configuration, schema or graph. Exit code 1."""

    exit_code = 1


class DataError(ResFlowError):
    """Malformed or incomplete input data. Exit code 2."""

    exit_code = 2


class CheckpointError(DataError):
    """Unreadable, corrupted or version-incompatible checkpoint."""


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value for the given input."""


class NumericalError(ResFlowError):
    """NaN/inf encountered during training. Exit code 3."""

    exit_code = 3
