"""Error types shared across the package."""


class ValidationError(ValueError):
    """Raised when an input violates an operation's preconditions."""


class NumericalAbort(RuntimeError):
    """Raised when a training step produces a non-finite quantity.

    Carries the name of the offending term so the failure is diagnosable
    from the exception message alone.
    """

    def __init__(self, term: str, value: float):
        self.term = term
        self.value = value
        super().__init__(f"non-finite value in term '{term}': {value!r}")
