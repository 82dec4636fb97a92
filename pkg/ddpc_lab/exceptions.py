"""
Error hierarchy for the lab. The runner maps each family onto a process exit code.
"""


class DdpcError(Exception):
    """Base class for all lab errors."""

    exit_code = 1


class ConfigError(DdpcError):
    """Invalid configuration document or command-line usage."""

    exit_code = 2


class DataError(DdpcError):
    """Malformed or insufficient input data."""

    exit_code = 3


class NumericalError(DdpcError):
    """A numerical routine could not produce a valid result."""

    exit_code = 4


class DimensionMismatch(DdpcError, ValueError):
    exit_code = 4


class OrderExceedsHorizon(DdpcError, ValueError):
    exit_code = 2


class EmptyTaskSet(DdpcError, ValueError):
    exit_code = 4


class ZeroTrace(DdpcError, ValueError):
    exit_code = 4


class InsufficientData(DataError):
    pass


class NotPositiveDefinite(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class NoConvergence(NumericalError):
    pass


class QpInfeasible(NumericalError):
    pass


class RunInvalid(NumericalError):
    pass
