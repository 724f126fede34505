"""Exception types raised across the package."""


class SchedulingError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(SchedulingError, ValueError):
    pass


class NonConvergence(SchedulingError, RuntimeError):
    """An iterative solver ran out of iterations.

    ``result`` carries the best iterate when the caller wants to inspect it.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class UnstableLadder(SchedulingError, OverflowError):
    pass


class StateOutOfRange(SchedulingError, IndexError):
    pass


class TooLarge(SchedulingError, ValueError):
    pass


class InvalidBudget(SchedulingError, ValueError):
    pass


class ChannelDead(SchedulingError, ValueError):
    pass


class NoSamples(SchedulingError, ValueError):
    pass


class DivergentTail(SchedulingError, ArithmeticError):
    pass


class ConfigError(SchedulingError, ValueError):
    """Invalid experiment configuration; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
