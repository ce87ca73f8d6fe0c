"""Exception hierarchy shared by all tracetime modules."""


class TracetimeError(Exception):
    """Base class for every error raised on bad input data."""


class TraceFormatError(TracetimeError, ValueError):
    """A trace file line does not match the event schema."""

    def __init__(self, path, line_no: int, message: str):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class ManifestError(TracetimeError, ValueError):
    """The dataset manifest is malformed or references missing files."""


class NotEnoughData(TracetimeError, ValueError):
    """Too few samples or batches to compute the requested quantity."""


class UnusableBatch(TracetimeError, ValueError):
    """The batch holds fewer than two events and cannot be analysed."""
