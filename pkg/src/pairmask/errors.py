"""Exception taxonomy shared across the toolkit.

Contract violations (bad shapes, labels out of range, malformed files) and
numeric failures (NaN/Inf, divergence) are kept distinct so the CLI can map
them to different exit codes.
"""


class ContractError(ValueError):
    """A precondition or invariant was violated by the caller."""


class ParseError(ContractError):
    """A file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericError(ArithmeticError):
    """A computation produced non-finite values or failed to converge."""


class TrainingError(NumericError):
    """Model training diverged."""


class ExplainerError(NumericError):
    """Mask fitting diverged; carries the last finite parameters."""

    def __init__(self, message: str, params=None):
        self.params = params
        super().__init__(message)


class DegenerateModelError(NumericError):
    """The model's outputs are too flat for a metric to be defined."""
