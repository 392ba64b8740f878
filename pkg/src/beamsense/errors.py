"""Exception types shared across the package."""


class BeamsenseError(Exception):
    """Base class for all errors raised by beamsense."""


class ParameterError(BeamsenseError, ValueError):
    """An argument violates the operation's precondition."""


class ConfigurationError(BeamsenseError, ValueError):
    """A configuration is internally inconsistent (e.g. delay overflow)."""


class LayoutError(BeamsenseError):
    """Random layout placement failed after bounded rejection attempts."""


class SimulationError(BeamsenseError):
    """A path simulation could not satisfy its termination contract."""


class NumericError(BeamsenseError, FloatingPointError):
    """Non-finite values appeared in a numerical computation."""


class TrainingError(NumericError):
    """Training diverged (loss became NaN or infinite)."""
