"""Exception types raised across the rovis package."""


class RovisError(Exception):
    """Base class for all rovis errors."""


class ShapeError(RovisError, ValueError):
    """An operation received operands with incompatible shapes."""


class GraphError(RovisError, RuntimeError):
    """The differentiation graph was used incorrectly."""


class ConfigError(RovisError, ValueError):
    """A configuration value or key is invalid."""


class FormatError(RovisError, ValueError):
    """A file or encoded payload does not follow the expected format."""


class TrainingError(RovisError, RuntimeError):
    """Training hit a non-recoverable state (e.g. a NaN loss)."""

    def __init__(self, message: str, record=None):
        super().__init__(message)
        self.record = record
