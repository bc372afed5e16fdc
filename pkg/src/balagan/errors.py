"""Exception types raised across the toolkit."""


class BalaganError(Exception):
    """Base class for all toolkit errors."""


class InsufficientData(BalaganError):
    """A split request asks for more items than a pool contains."""

    def __init__(self, pool: str, requested: int, available: int):
        self.pool = pool
        self.requested = requested
        self.available = available
        super().__init__(
            f"pool '{pool}' has {available} items, {requested} requested "
            f"(short by {requested - available})"
        )


class DecodeError(BalaganError):
    """One or more image files could not be decoded."""

    def __init__(self, offenders):
        self.offenders = list(offenders)
        super().__init__(f"failed to decode {len(self.offenders)} file(s): "
                         + ", ".join(str(o) for o in self.offenders))


class EmptyRequest(BalaganError):
    """A batch was requested with an empty id list."""


class ConfigError(BalaganError):
    """Invalid configuration value or file."""


class DegenerateBatch(BalaganError):
    """Contrastive batch too small to contain any negatives."""


class NonFiniteLoss(BalaganError):
    """A training loss became NaN or infinite."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"non-finite loss at step {step}" + (f": {detail}" if detail else ""))


class NonFiniteGradient(BalaganError):
    """An input gradient became NaN or infinite."""


class TooFewPoints(BalaganError):
    """Clustering asked for more clusters than there are points."""


class TooFewSamples(BalaganError):
    """Activation statistics need at least two samples."""


class InvalidK(BalaganError):
    """A modality-count override violates the balance rule."""


class InconsistentAssignment(BalaganError):
    """A modality assignment does not match the requested class-set mode."""


class EmptyClass(BalaganError):
    """A training class has no member images."""


class ShapeMismatch(BalaganError):
    """Paired batches disagree on batch size or resolution."""


class DuplicateK(BalaganError):
    """A k-sweep lists the same modality count twice."""
