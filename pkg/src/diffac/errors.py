class DiffACError(Exception):
    """Base class for library errors."""


class ContractError(DiffACError, ValueError):
    """A precondition on shapes, ranges or configuration was violated."""


class NumericError(DiffACError, ArithmeticError):
    """A computation produced NaN or inf."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class UnsupportedStepError(DiffACError, ValueError):
    """Requested a transition density for the deterministic final step."""


class DivergenceError(DiffACError, RuntimeError):
    """Training produced a non-finite reward and was aborted."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
