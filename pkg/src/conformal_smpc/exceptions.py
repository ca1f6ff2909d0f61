"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failure classes to
process exit statuses without string matching.
"""


class SmpcError(Exception):
    exit_code = 1


class ConfigError(SmpcError, ValueError):
    exit_code = 2


class DimensionError(SmpcError, ValueError):
    exit_code = 2


class StabilityError(SmpcError, ValueError):
    """A gain does not render the closed-loop (or observer) matrix Schur."""

    exit_code = 2


class DatasetError(SmpcError):
    exit_code = 3


class DatasetParseError(DatasetError):
    pass


class RaggedDatasetError(DatasetError):
    pass


class DatasetDimensionError(DatasetError):
    pass


class AlignmentError(DatasetError):
    """Disturbance and noise datasets do not pair sample-by-sample."""


class CalibrationError(SmpcError):
    exit_code = 4


class InsufficientSamplesError(CalibrationError):
    def __init__(self, message, min_samples):
        super().__init__(message)
        self.min_samples = min_samples


class PacInfeasibleError(CalibrationError):
    def __init__(self, message, min_samples):
        super().__init__(message)
        self.min_samples = min_samples


class EmptySetError(SmpcError):
    """A tightened constraint set has no interior point."""

    exit_code = 5


class InitialInfeasibilityError(SmpcError):
    exit_code = 5

    def __init__(self, message, violated=()):
        super().__init__(message)
        self.violated = tuple(violated)


class QpInputError(SmpcError, ValueError):
    pass
