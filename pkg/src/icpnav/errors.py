"""Exception types shared across the package."""


class NumericError(RuntimeError):
    """A numerical operation left its validity domain (ill-conditioned
    innovation covariance, non-PSD covariance, non-finite matrices,
    eigensolver non-convergence)."""


class DegenerateGeometryError(ValueError):
    """Point-set geometry cannot support the requested alignment
    (fewer than 3 points for a rigid fit, empty scan)."""


class ConfigError(ValueError):
    """A scenario, filter, or run configuration is invalid."""


class FileFormatError(ValueError):
    """A data file could not be parsed.  Carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
