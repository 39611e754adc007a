"""Exception taxonomy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DependencyError -> 3,
DivergenceError -> 4, anything else -> 1.
"""


class OpforgeError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(OpforgeError, ValueError):
    """Operands have incompatible or unsupported shapes."""


class ParameterError(OpforgeError, ValueError):
    """A value is outside its documented domain (negative sigma, even kernel, ...)."""


class NumericError(OpforgeError, ArithmeticError):
    """Non-finite input where finite values are required."""


class GraphError(OpforgeError, RuntimeError):
    """Autodiff contract violation (non-scalar loss, missing tape, ...)."""


class DivergenceError(OpforgeError, ArithmeticError):
    """NaN or Inf appeared during training or sampling.

    Carries enough context (step index, parameter name, trace) to diagnose.
    """

    def __init__(self, message, step=None, param=None, trace=None):
        super().__init__(message)
        self.step = step
        self.param = param
        self.trace = trace


class ConfigError(OpforgeError, ValueError):
    """Invalid or inconsistent run configuration."""


class DependencyError(OpforgeError, RuntimeError):
    """A required upstream artifact is missing.

    ``hint`` names the subcommand that produces the artifact.
    """

    def __init__(self, message, hint=None):
        super().__init__(message)
        self.hint = hint
