"""Exception and warning types shared across the package."""


class PangaeaError(Exception):
    """Base class for all package-specific errors."""


class ContractError(PangaeaError, ValueError):
    """An input violates an operation's documented precondition."""


class DimensionError(ContractError):
    """Shapes or lengths are inconsistent with what the operation requires."""


class CapacityError(ContractError):
    """An index or size exceeds a fixed capacity (padding width, embedding table)."""


class ConfigError(ContractError):
    """A configuration value is invalid or internally inconsistent."""


class DomainError(ContractError):
    """A numeric argument lies outside its mathematical domain."""


class EvaluationError(PangaeaError, ArithmeticError):
    """A function produced a non-finite value where a finite one is required."""


class ImputationError(PangaeaError, ValueError):
    """A column cannot be imputed (e.g. no observed values to take a mode/mean from)."""


class UndefinedMetricError(PangaeaError, ValueError):
    """The metric is undefined for this batch (e.g. AUC with a single class)."""


class DegenerateNormalizationError(PangaeaError, ValueError):
    """Normalization is impossible (constant input where a spread is required)."""


class FitError(PangaeaError, RuntimeError):
    """Curve fitting cannot proceed (degenerate points)."""


class ParseError(PangaeaError, ValueError):
    """A file could not be parsed; carries the offending line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(PangaeaError, RuntimeError):
    """Base class for checkpoint load/save failures."""


class VersionMismatchError(CheckpointError):
    """Checkpoint format version differs from what this code writes."""


class PayloadError(CheckpointError):
    """Checkpoint payload is truncated or fails its checksum."""


class ParameterShapeError(CheckpointError):
    """A stored parameter does not match the model it is being loaded into."""

    def __init__(self, name, expected, found):
        super().__init__(f"parameter {name!r}: expected shape {tuple(expected)}, file has {tuple(found)}")
        self.name = name


class DegenerateDataWarning(UserWarning):
    """Emitted when a degenerate input forces a defined fallback (std=1, F1=0, ...)."""
