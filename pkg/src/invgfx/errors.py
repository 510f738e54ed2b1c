"""Exception taxonomy shared across the package."""


class InvgfxError(Exception):
    """Base class for all package-specific failures."""


class DimensionError(InvgfxError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(InvgfxError):
    """Operand values lie outside the operation's domain (log of 0, NaN coords, ...)."""


class ConfigError(InvgfxError):
    """A configuration value is missing, unknown, or out of range."""


class UsageError(InvgfxError):
    """The API was called in an unsupported way (non-scalar loss, missing grads, ...)."""


class NearPlaneError(DomainError):
    """Points fell behind the projection near plane."""

    def __init__(self, indices, z_min):
        self.indices = list(indices)
        self.z_min = z_min
        shown = self.indices[:8]
        more = "" if len(self.indices) <= 8 else " (+%d more)" % (len(self.indices) - 8)
        super().__init__(
            "projection requires Z > %g; violated at indices %s%s" % (z_min, shown, more)
        )


class DegenerateWarpError(DomainError):
    """Every warped sample fell outside the target image."""


class DegeneratePoseError(DomainError):
    """A skeleton is too degenerate to orient (e.g. coincident hips)."""


class RankError(InvgfxError):
    """Data rank is insufficient for the requested decomposition."""


class CurationError(InvgfxError):
    """A memory-bank curation step produced an empty bank."""


class CheckpointVersionError(InvgfxError):
    """Checkpoint container version is not supported by this build."""


class TrainingDivergedError(InvgfxError):
    """A loss became non-finite; training aborted with a diagnostic dump."""

    def __init__(self, message, dump_path=None):
        self.dump_path = dump_path
        if dump_path is not None:
            message = "%s (diagnostic state dumped to %s)" % (message, dump_path)
        super().__init__(message)
