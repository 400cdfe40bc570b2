"""trajguard custom exceptions."""


class TrajguardException(Exception):

    """Base class for errors thrown by trajguard."""


class ParameterError(TrajguardException, ValueError):

    """An argument is outside the range an operation accepts."""


class CapabilityError(TrajguardException):

    """A gradient was requested from a model that only answers queries."""


class NumericalError(TrajguardException):

    """A loss or probe evaluated to a non-finite value."""

    def __init__(self, message, trace=None, probe=None):
        super(NumericalError, self).__init__(message)
        self.trace = trace if trace is not None else []
        self.probe = probe


class QueryBudgetExceeded(TrajguardException):

    """A query-only model was asked for more queries than its cap."""


class ModelError(TrajguardException):

    """A model could not be built, loaded or evaluated."""


class ConfigError(TrajguardException):

    """A run or ablation config failed schema validation."""


class AlignmentError(TrajguardException):

    """Clean and adversarial image sets do not pair up by filename."""

    def __init__(self, message, missing=None):
        super(AlignmentError, self).__init__(message)
        self.missing = list(missing or [])


class InputError(TrajguardException):

    """No inputs were found, or an input image could not be read."""
