"""Exception types shared across the package.

The CLI maps ConfigError to exit code 1 and every other MaskoError (or
unexpected exception) to exit code 2.
"""


class MaskoError(Exception):
    """Base class for all package errors."""


class DimensionError(MaskoError):
    """Operand shapes are incompatible."""


class ParameterError(MaskoError):
    """A numeric argument is outside its valid range."""


class ConfigError(MaskoError):
    """Invalid configuration (bad field, unknown key, bad CLI usage)."""


class ContractError(MaskoError):
    """A caller violated an API precondition."""


class DomainError(MaskoError):
    """An input lies outside a function's mathematical domain."""


class FormatError(MaskoError):
    """A binary file does not match its expected layout."""


class EvaluationError(MaskoError):
    """A numeric evaluation produced a non-finite result."""
