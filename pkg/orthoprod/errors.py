"""
Exception hierarchy for orthoprod.

Usage errors (bad arguments, configuration, input files) map to CLI exit
code 2; estimation errors (numerical or statistical failures) map to 1.
"""


class OrthoProdError(Exception):
    """Base class for all orthoprod errors."""
    exit_code = 1


class UsageError(OrthoProdError, ValueError):
    exit_code = 2


class ConfigError(UsageError):
    pass


class SchemaError(UsageError):
    pass


class PanelParseError(UsageError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"{message} (row {row})")
        self.row = row


class ArgumentError(UsageError):
    pass


class EstimationError(OrthoProdError):
    exit_code = 1


class NumericError(EstimationError):
    pass


class FitError(EstimationError):
    pass


class DesignError(EstimationError):
    pass


class InitializationError(EstimationError):
    pass


class ProfilingError(EstimationError):
    pass


class SystemSpecError(EstimationError):
    pass


class StateError(EstimationError):
    pass


class BootstrapError(EstimationError):
    pass


class ExperimentError(EstimationError):
    pass


class ExportError(EstimationError):
    pass
