"""Exception hierarchy shared across the package.

Every error that crosses the CLI boundary maps onto one of these classes so
exit codes stay stable: usage problems raise :class:`InvalidArgumentError`,
file problems raise one of the ``File*Error`` classes, and anything else is
treated as an internal error.
"""


class ShimError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(ShimError, ValueError):
    """An argument violates a documented precondition."""


class InvalidGeometryError(InvalidArgumentError):
    """Coil/phantom layout is physically inconsistent (coil inside phantom)."""


class RankDeficiencyError(ShimError):
    """Unregularized normal equations are numerically singular."""


class FileFormatError(ShimError):
    """File is not in the expected container format (bad magic or layout)."""


class FileVersionError(FileFormatError):
    """Container version is not supported by this build."""


class FileTruncatedError(FileFormatError):
    """File ended before the declared payload was read."""


class FileChecksumError(FileFormatError):
    """Trailing CRC32 does not match the file contents."""


class GenerationShortfallError(ShimError):
    """Labeled-sample synthesis could not reach the requested count.

    Carries the class name so callers can report which side fell short.
    """

    def __init__(self, label: str, requested: int, produced: int):
        self.label = label
        self.requested = requested
        self.produced = produced
        super().__init__(
            f"could not synthesize {requested} '{label}' samples "
            f"(got {produced}); relax the criterion or supply more records"
        )
