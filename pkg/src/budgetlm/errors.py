"""Exception hierarchy shared across the package."""


class BudgetLmError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(BudgetLmError):
    """Tensor shapes do not conform to the operation being applied."""


class ContractError(BudgetLmError):
    """An API precondition was violated (wrong mode, mismatched vocab, ...)."""


class NumericError(BudgetLmError):
    """A computation produced or encountered non-finite values."""


class IngestionError(BudgetLmError):
    """Corpus files could not be read, tokenized or split."""


class LayoutError(BudgetLmError):
    """A batch/unroll layout cannot be realized on the given stream."""


class SizingError(BudgetLmError):
    """No model fits the requested parameter budget."""

    def __init__(self, message: str, minimum_budget: int | None = None):
        super().__init__(message)
        self.minimum_budget = minimum_budget


class ConfigError(BudgetLmError):
    """Configuration file parsing or validation failed."""


class CheckpointError(BudgetLmError):
    """Checkpoint serialization or deserialization failed."""


class TrainingDiverged(BudgetLmError):
    """Validation loss became non-finite; the last checkpoint is preserved."""
