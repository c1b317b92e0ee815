"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition or invariant of the public API was violated.

    The message always names the violated condition. CLI maps this to
    exit code 1.
    """


class FormatError(Exception):
    """A file could not be parsed (bad magic, schema violation, truncation).

    CLI maps this, together with OSError, to exit code 2.
    """


class NumericalError(RuntimeError):
    """A computation produced non-finite values and was aborted."""
