"""Exception hierarchy shared by all otmatch modules."""


class OTMatchError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(OTMatchError, ValueError):
    """Array shapes do not line up."""


class NumericError(OTMatchError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class StateError(OTMatchError, RuntimeError):
    """An object was used in a state that does not permit the operation."""


class ParameterError(OTMatchError, ValueError):
    """A scalar parameter is outside its valid range."""


class MarginalError(OTMatchError, ValueError):
    """Transport marginals are invalid or carry different total mass."""


class ScaleError(OTMatchError, ValueError):
    """The instance is larger than the solver is meant to handle."""


class SupportError(OTMatchError, ValueError):
    """A measure puts mass where the reference measure has none."""


class PreconditionError(OTMatchError, ValueError):
    """An operation's documented precondition does not hold."""


class ConvergenceError(OTMatchError, RuntimeError):
    """An iterative solver stopped before reaching its tolerance.

    ``residual`` holds the final marginal violation.
    """

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class DegenerateError(OTMatchError, ValueError):
    """Input is degenerate (zero-norm head column, all-zero state, ...)."""


class FormatError(OTMatchError, ValueError):
    """A file does not follow the expected layout."""


class SamplingError(OTMatchError, ValueError):
    """A batch cannot be drawn from the given dataset."""


class ConfigError(OTMatchError, ValueError):
    """A configuration key is unknown or its value fails validation."""


class TrainingDivergedError(OTMatchError, FloatingPointError):
    """The training loss became non-finite.

    ``diagnostic_path`` points at the dumped snapshot when one was written.
    """

    def __init__(self, message, diagnostic_path=None):
        super().__init__(message)
        self.diagnostic_path = diagnostic_path
