"""Exception types shared across the package."""


class ProgrecalError(Exception):
    """Base class for all package errors."""


class ParameterError(ProgrecalError, ValueError):
    """An operation or generator received an invalid parameter."""


class DegenerateInputError(ProgrecalError, ValueError):
    """Input is mathematically degenerate for the operation (e.g. zero norm)."""


class ContractError(ProgrecalError, ValueError):
    """A documented precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class GradientStateError(ProgrecalError, RuntimeError):
    """Backward was called on a graph whose leaves still hold gradients."""


class ConfigurationError(ProgrecalError, ValueError):
    """An experiment or dataset configuration cannot be satisfied."""


class TrainingSetupError(ProgrecalError, ValueError):
    """Training cannot start with the given data (e.g. a single class)."""


class MissingArtifactError(ProgrecalError, FileNotFoundError):
    """An upstream stage artifact required by a stage does not exist."""
