"""Shared exception types."""


class ContractViolation(ValueError):
    """Raised when an input violates a documented precondition.

    The CLI maps this to exit code 2.
    """
