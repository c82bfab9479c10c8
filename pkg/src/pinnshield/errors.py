"""Exception hierarchy shared by all pinnshield modules."""


class PinnShieldError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(PinnShieldError, ValueError):
    """Invalid configuration, shapes, or contract violations on inputs."""


class NumericalError(PinnShieldError, RuntimeError):
    """An iterative method failed to converge or produced non-finite values."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class DivergenceError(NumericalError):
    """Training loss became non-finite."""


class OutOfDomainError(PinnShieldError, ValueError):
    """A query point lies outside the grid or inside the obstacle."""


class ParseError(PinnShieldError, ValueError):
    """Malformed file. ``line`` or ``offset`` locate the problem when known."""

    def __init__(self, message, line=None, offset=None):
        super().__init__(message)
        self.line = line
        self.offset = offset


class VersionError(PinnShieldError, ValueError):
    """Checkpoint written by an incompatible format version."""


class InvalidBatchError(PinnShieldError, ValueError):
    """A loss term with positive weight received an empty batch."""


class EmptyWindowError(PinnShieldError, ValueError):
    """Windowing selected no grid points."""


class DegenerateNormalizationError(PinnShieldError, ValueError):
    """Ground truth has zero range, so the normalized accuracy is undefined."""

    def __init__(self, message, mae=None):
        super().__init__(message)
        self.mae = mae


class CalibrationError(PinnShieldError, ValueError):
    """Too few clean residuals to calibrate the detector."""
