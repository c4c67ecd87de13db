"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration/usage problems exit 1,
I/O and schema problems exit 2, runtime invariant violations exit 3.
"""


class MoePolicyError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class ConfigurationError(MoePolicyError):
    """Bad configuration: unknown keys, invalid values, impossible setups."""

    exit_code = 1


class InvalidInputError(MoePolicyError):
    """An operation was called with inputs violating its preconditions."""

    exit_code = 1


class DataError(MoePolicyError):
    """File I/O or schema problems (missing files, malformed lines)."""

    exit_code = 2


class InvariantViolationError(MoePolicyError):
    """A runtime invariant that should hold by construction was violated."""

    exit_code = 3


class InvalidStateError(MoePolicyError):
    """An operation was invoked in the wrong mode or phase."""

    exit_code = 3
