class IntouError(Exception):
    """Base class for all package errors."""


class InputError(IntouError, ValueError):
    """Malformed input: shapes, ordering, file contents."""


class DomainError(IntouError, ValueError):
    """Parameter outside its admissible set."""


class ConfigError(IntouError, ValueError):
    """Invalid scenario, optimizer or study configuration."""


class NumericalError(IntouError, ArithmeticError):
    """A factorization or evaluation failed numerically."""

    def __init__(self, message, individual=None):
        super().__init__(message if individual is None else f"{message} (individual {individual})")
        self.individual = individual


class InferenceError(IntouError, ArithmeticError):
    """Sandwich or Studentization quantities are not usable."""


class RankDeficiencyError(IntouError, ArithmeticError):
    """A least-squares Gram matrix is singular."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column
