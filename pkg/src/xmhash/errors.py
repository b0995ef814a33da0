"""Exception types shared across the package.

Three failure families are kept apart on purpose: caller mistakes
(ContractError), numerical breakdown discovered mid-computation
(NumericalError), and malformed files on disk (LoadError). Code never
catches ContractError internally; it always means a bug at the call site.
"""


class ContractError(ValueError):
    """A precondition or invariant was violated by the caller."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or a factorization failed."""


class LoadError(RuntimeError):
    """A file on disk does not match its documented format."""
