"""Exception types shared across the package."""


class NeuroFuzzError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(NeuroFuzzError):
    """A documented precondition or invariant was violated by the caller."""


class IngestError(NeuroFuzzError):
    """A dataset or image file could not be parsed.

    Carries the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, *, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ModelLoadError(NeuroFuzzError):
    """A model file is malformed or structurally invalid."""


class TrainingError(NeuroFuzzError):
    """Training diverged or was configured inconsistently."""
