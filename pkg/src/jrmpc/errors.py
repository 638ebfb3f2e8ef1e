"""Exception hierarchy for the jrmpc package."""


class RegistrationError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatchError(RegistrationError, ValueError):
    """Inputs whose shapes or counts do not agree."""


class DomainError(RegistrationError, ValueError):
    """A value outside the mathematical domain of an operation."""


class DegenerateGeometryError(RegistrationError):
    """Point configuration too flat/collinear to constrain a rotation."""


class InsufficientConstraintsError(RegistrationError):
    """Fewer than three active components available for a rigid fit."""


class DivergenceError(RegistrationError):
    """EM produced non-finite parameters or objective."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration


class EmptyModelError(RegistrationError):
    """Every mixture component was rejected as an outlier cluster."""


class PointFileError(RegistrationError, ValueError):
    """Malformed point-cloud file."""

    def __init__(self, message: str, path=None, line: int | None = None):
        detail = message
        if path is not None:
            detail = f"{path}: {detail}"
        if line is not None:
            detail = f"{detail} (line {line})"
        super().__init__(detail)
        self.path = path
        self.line = line


class ConfigError(RegistrationError, ValueError):
    """Invalid or unknown configuration content."""
