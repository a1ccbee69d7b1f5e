"""Exception classes shared across the toolkit.

Each class carries the process exit code the CLI maps it to.
"""


class CodecPatchError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class InputFormatError(CodecPatchError):
    """Unreadable, truncated, or malformed input file."""

    exit_code = 1


class ConfigError(CodecPatchError):
    """Inconsistent or out-of-range configuration."""

    exit_code = 2


class InvariantError(CodecPatchError):
    """A structural contract was violated (geometry mismatch, bad layout)."""

    exit_code = 3


class GeometryError(InvariantError):
    """Frame or grid geometry does not match between operands."""


class InfeasibleBudgetError(CodecPatchError):
    """Token budget cannot be satisfied for the given clip."""

    exit_code = 4
