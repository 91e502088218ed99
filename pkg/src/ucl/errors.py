"""Exception hierarchy shared across the package."""


class UCLError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(UCLError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateVectorError(UCLError, ValueError):
    """A vector with zero norm was used where a direction is required."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class ContractError(UCLError, ValueError):
    """A documented precondition was violated."""


class EmptyNegativeSet(ContractError):
    """No negatives remain after masking; the pair is skipped."""


class EmptyBatchError(ContractError):
    """Every pair in a batch was skipped."""


class InsufficientBatchError(UCLError, ValueError):
    """Batch statistics need at least two rows."""


class LabelError(UCLError, ValueError):
    """A class id is outside ``[0, K)``."""


class ConfigError(UCLError, ValueError):
    """Invalid configuration value or unknown key."""


class SpecError(ConfigError):
    """Invalid synthetic dataset specification."""


class ParseError(UCLError, ValueError):
    """Malformed input file."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class NonFiniteError(UCLError, FloatingPointError):
    """An operation produced NaN or Inf."""


class NumericAbort(UCLError, RuntimeError):
    """Training stopped on a non-finite loss; ``diagnostics`` holds the dump."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(UCLError, OSError):
    """Checkpoint could not be read back."""
