"""Exception hierarchy mapped to CLI exit codes."""


class FewseqError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class UsageError(FewseqError):
    """Bad CLI arguments or an invalid/unknown config key."""

    exit_code = 2


class DataError(FewseqError):
    """Dataset or episode problems: missing classes, short classes,
    malformed files, shape mismatches."""

    exit_code = 3


class NumericError(FewseqError):
    """Numerical failures: non-finite losses, zero-norm vectors."""

    exit_code = 4


class IOFailure(FewseqError):
    """Filesystem problems while reading or writing artifacts."""

    exit_code = 5
