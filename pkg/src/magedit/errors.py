"""Exception hierarchy. The CLI maps each class onto an exit code."""


class MagEditError(Exception):
    exit_code = 1


class ConfigError(MagEditError, ValueError):
    exit_code = 2


class ContractError(MagEditError, ValueError):
    """A caller violated an operation's preconditions (shapes, positions, ...)."""

    exit_code = 2


class ScheduleError(MagEditError, ValueError):
    exit_code = 2


class EmptyEditRegion(ConfigError):
    pass


class MissingTrajectory(MagEditError):
    exit_code = 2


class BackendError(MagEditError, RuntimeError):
    exit_code = 3


class NumericAbort(MagEditError, ArithmeticError):
    """Raised when a loss or gradient turns non-finite. Carries the trace so far."""

    exit_code = 4

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])
