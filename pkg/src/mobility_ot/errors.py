"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain where the operation is defined."""


class ConeViolation(ValueError):
    """A particle configuration does not satisfy the minimal-gap constraint."""


class NonConvergence(RuntimeError):
    """Raised when an optimizer stops above tolerance.

    ``result`` holds the best iterate found so far, so callers can still
    inspect or use it.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class StepFailure(RuntimeError):
    """ODE integration could not find an admissible step size."""


class ConfigError(ValueError):
    """Malformed study configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
