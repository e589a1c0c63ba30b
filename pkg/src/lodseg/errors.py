"""Exception hierarchy.

Every error raised on purpose by this package derives from LodsegError so
callers (and the CLI) can tell validation failures apart from genuine bugs.
"""


class LodsegError(Exception):
    """Base class for all errors raised by lodseg."""


class FormatError(LodsegError):
    """Malformed file or container: bad magic, wrong dimensionality, bad dtype."""


class MigrationError(FormatError):
    """Checkpoint produced by an incompatible format version."""


class GeometryError(LodsegError):
    """Degenerate or unusable affine geometry."""


class SanitationError(LodsegError):
    """Data content violates sanity rules (non-finite voxels and the like)."""


class ContractError(LodsegError):
    """A precondition on in-memory values was violated by the caller."""


class ConfigError(LodsegError):
    """Invalid or inconsistent configuration."""


class NumericsError(LodsegError):
    """Numerical failure during optimization (NaN losses and the like)."""
