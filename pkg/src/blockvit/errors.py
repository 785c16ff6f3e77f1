"""Exception hierarchy.

The three top-level families map onto CLI exit codes: configuration
problems exit with 2, data problems with 3 and numerical problems with 4.
"""


class BlockVitError(Exception):
    exit_code = 1


class ConfigError(BlockVitError, ValueError):
    exit_code = 2


class PolicyError(ConfigError):
    pass


class ScheduleError(ConfigError):
    pass


class DataError(BlockVitError, ValueError):
    exit_code = 3


class LabelError(DataError):
    pass


class WeightingError(DataError):
    pass


class CorruptionError(DataError):
    pass


class VersionError(DataError):
    pass


class NumericError(BlockVitError, ArithmeticError):
    exit_code = 4


class DimensionError(NumericError, ValueError):
    pass


class DomainError(NumericError, ValueError):
    pass


class OptimizerError(NumericError):
    pass


class ModelError(NumericError):
    pass


class PairingError(NumericError):
    pass


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""


class UndefinedMetricError(NumericError):
    """A metric whose formula has a zero denominator for this input."""


class AnalysisError(NumericError):
    pass
