"""Exception types raised across the workbench."""


class WorkbenchError(Exception):
    """Base class for all workbench errors."""


class DimensionError(WorkbenchError, ValueError):
    """Array shapes or lengths do not line up."""


class PrivacyParameterError(WorkbenchError, ValueError):
    """Invalid mechanism parameters (sigma, sampling ratio, steps or delta)."""


class ResolutionError(WorkbenchError, RuntimeError):
    """The numerical accountant cannot resolve the request on its grid."""


class CalibrationError(WorkbenchError, RuntimeError):
    """Noise calibration could not reach the requested budget."""

    def __init__(self, message: str, bracket: tuple[float, float] | None = None):
        super().__init__(message)
        self.bracket = bracket


class ConfigError(WorkbenchError, ValueError):
    """Configuration is malformed or violates a constraint."""

    def __init__(self, message: str, violations: list[str] | None = None):
        super().__init__(message)
        self.violations = list(violations or [])


class MetricError(WorkbenchError, ValueError):
    """A metric is undefined for the given input."""


class ShardError(WorkbenchError, ValueError):
    """Clients cannot be formed from the given dataset."""
