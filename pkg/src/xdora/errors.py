"""Exception types shared across the engine.

Grouped by the surface that raises them; all inherit from XdoraError so
callers (and the CLI) can map failures to exit codes in one place.
"""


class XdoraError(Exception):
    """Base class for every error raised by this package."""


# numeric kernels -------------------------------------------------------

class ZeroVector(XdoraError):
    """A vector with (near-)zero norm was passed where a direction is required."""


class NonFinite(XdoraError):
    """A NaN or Inf appeared where only finite values are allowed."""


class DimensionMismatch(XdoraError):
    """Array shapes are inconsistent with the declared configuration."""


# dataset / file formats -------------------------------------------------

class FormatError(XdoraError):
    """Base class for binary container format violations."""


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class InvalidRecord(FormatError):
    """Record-level value violation (non-finite floats, bad mask bytes)."""


class UnknownSourceLabel(XdoraError):
    pass


class ClassTooSmall(XdoraError):
    pass


class EmptyClass(XdoraError):
    pass


class UnlabeledRecord(XdoraError):
    """Label -1 is legal in files but rejected by split/weight operations."""


# fusion network ---------------------------------------------------------

class AllMasked(XdoraError):
    """An attention mask admits no key positions."""


class LabelOutOfRange(XdoraError):
    pass


class NonFiniteLoss(XdoraError):
    pass


# retrieval --------------------------------------------------------------

class EmptyIndex(XdoraError):
    pass


class ClassMissing(XdoraError):
    """A requested class has no entries in the index."""


class EmptyNeighborSet(XdoraError):
    pass


# prompting / service ----------------------------------------------------

class UnbalancedExemplars(XdoraError):
    pass


class EmptyCaption(XdoraError):
    pass


class MissingCaption(XdoraError):
    pass


class Unparseable(XdoraError):
    """The service response contains no recognizable label token."""


class Transport(XdoraError):
    """Network-level failure after exhausting retries."""


class ServiceError(XdoraError):
    """The inference service answered with an error status."""

    def __init__(self, status: int, body: str):
        super().__init__(f"service returned status {status}: {body[:200]}")
        self.status = status
        self.body = body


# evaluation --------------------------------------------------------------

class EmptyInput(XdoraError):
    pass
