"""Exception hierarchy shared by all slsfilter modules."""


class SafetyFilterError(Exception):
    """Base class for every error raised by slsfilter."""


class DimensionMismatchError(SafetyFilterError, ValueError):
    pass


class InfeasibleError(SafetyFilterError):
    pass


class UnboundedError(SafetyFilterError):
    pass


class EmptySetError(SafetyFilterError):
    pass


class NotConvergedError(SafetyFilterError):
    def __init__(self, message: str, iterations: int | None = None):
        super().__init__(message)
        self.iterations = iterations


class NotStableError(SafetyFilterError):
    pass


class NotStabilizableError(SafetyFilterError):
    pass


class DimensionTooLargeError(SafetyFilterError):
    pass


class SingularResponseError(SafetyFilterError):
    pass


class SolverFailureError(SafetyFilterError):
    def __init__(self, message: str, solution=None):
        super().__init__(message)
        self.solution = solution


class HistoryInconsistentError(SafetyFilterError):
    pass


class InitialStateOutsideSafeSetError(SafetyFilterError):
    pass


class ConfigError(SafetyFilterError):
    """Invalid configuration file; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
