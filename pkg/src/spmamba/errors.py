"""Exception hierarchy shared by every subpackage."""


class SPMambaError(Exception):
    """Base class for all library errors."""


class DimensionError(SPMambaError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(SPMambaError, ValueError):
    """A configuration value is invalid or contradicts another one."""


class StateError(SPMambaError, RuntimeError):
    pass


class UsageError(SPMambaError, ValueError):
    pass


class NumericalError(SPMambaError, FloatingPointError):
    """A NaN or Inf showed up at an op boundary while checked mode was on."""


class StabilityError(SPMambaError, ValueError):
    """A state matrix entry is not strictly negative."""


class DeterminismError(SPMambaError, RuntimeError):
    pass


class DataError(SPMambaError, ValueError):
    pass


class LoadError(SPMambaError, ValueError):
    pass


class EvaluationError(SPMambaError, ValueError):
    pass


class DivergenceError(SPMambaError, RuntimeError):
    """Training produced a non-finite loss."""
