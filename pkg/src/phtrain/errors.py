"""Exception hierarchy shared across the package."""


class PHTError(Exception):
    """Base class for all errors raised by phtrain."""


class ConfigurationError(PHTError, ValueError):
    """Invalid configuration, shape mismatch or violated precondition."""


class DataError(PHTError, ValueError):
    """Malformed or inconsistent data (bad labels, missing resources, ...)."""


class ResolutionError(DataError):
    """A station could not resolve its dataset (dangling reference, missing blob)."""


class NonFiniteGradientError(PHTError, FloatingPointError):
    pass


class TrainingDivergedError(PHTError, FloatingPointError):
    """Loss became NaN/Inf; ``partial`` holds what was computed before that."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class TamperError(PHTError):
    """Bundle digest does not match its contents."""


class NotFoundError(PHTError, KeyError):
    def __str__(self):
        # KeyError quotes its argument; keep messages readable
        return str(self.args[0]) if self.args else ""


class RouteError(PHTError):
    """Train delivered to a station that is not next on its route."""


class StationFailure(PHTError):
    """A station visit or replica failed; the run stops."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
