"""
caila.exceptions
~~~~~~~~~~~~~~~~

Stores all custom exceptions raised in caila.
"""


class CailaError(Exception):
    """Base class of every error raised by caila"""


class DimensionError(CailaError, ValueError):
    """Tensor or image shapes do not agree"""


class ParameterError(CailaError, ValueError):
    """An operation parameter is out of its valid range"""


class ContractError(CailaError):
    """A pre-condition of an operation was violated by the caller"""


class DegenerateInputError(CailaError, ArithmeticError):
    """Input has no defined result, e.g. normalizing a zero vector"""


class NonFiniteError(CailaError, ArithmeticError):
    """An operation produced NaN or Inf"""


class VocabularyError(CailaError, KeyError):
    """Word, attribute or object is not part of the vocabulary"""

    def __str__(self) -> str:
        # KeyError quotes its message, keep it readable
        return str(self.args[0]) if self.args else ""


class ConfigError(CailaError, ValueError):
    """Configuration file or value is invalid"""


class TrainingError(CailaError, RuntimeError):
    """Optimization diverged or was fed invalid gradients"""


class FormatError(CailaError):
    """File does not have the expected format or version"""


class CorruptionError(FormatError):
    """File has the right format but its content is damaged or truncated"""


# Warnings


class ConfigWarning(UserWarning):
    """A configuration value was ignored"""


class ShiftSkippedWarning(UserWarning):
    """A concept-shift slot was skipped because no valid donor pair was found"""
