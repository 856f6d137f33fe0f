"""Exception hierarchy shared by every rankshield module."""


class RankShieldError(Exception):
    """Base class for all library errors."""


class ShapeError(RankShieldError, ValueError):
    """Input has the wrong dimension or contains non-finite values."""


class UsageError(RankShieldError, ValueError):
    """Arguments violate an operation's preconditions."""


class CapabilityError(RankShieldError):
    """The requested computation is not supported for this model or size."""


class TrainingError(RankShieldError, RuntimeError):
    """Training diverged."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class EstimationError(RankShieldError, RuntimeError):
    """A Monte-Carlo estimate could not be produced."""


class AttackError(RankShieldError, RuntimeError):
    """An attack could not compute its step direction."""


class NumericError(RankShieldError, ArithmeticError):
    """A numerical sub-solver failed (e.g. an unbounded linear program)."""


class IngestionError(RankShieldError, ValueError):
    """A data file could not be parsed."""

    def __init__(self, message, row=None, col=None):
        if row is not None or col is not None:
            message = f"{message} (row {row}, column {col})"
        super().__init__(message)
        self.row = row
        self.col = col
