"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class LsmuError(Exception):
    exit_code = 1


class ConfigError(LsmuError, ValueError):
    """Bad shapes, bad configuration values, incompatible options."""

    exit_code = 2


class NumericError(LsmuError, ArithmeticError):
    """Non-finite values where finite ones were promised."""

    exit_code = 3


class DivergenceError(NumericError):
    """Latent pair integral does not converge (encoder std exceeds the prior's)."""

    def __init__(self, message, dimension=None):
        super().__init__(message)
        self.dimension = dimension


class DomainError(LsmuError, ValueError):
    """Parameters outside a model's declared domain."""

    exit_code = 3
