"""Exception types surfaced to callers and the CLI."""


class CapgenError(Exception):
    """Base class for pipeline errors (bad files, broken references)."""


class FileFormatError(CapgenError):
    """A data file does not match its declared format."""


class DuplicateIdError(FileFormatError):
    """The same image id appears more than once in one file."""


class IntegrityError(CapgenError):
    """Cross-file referential integrity is violated (e.g. a caption whose
    image id has no embedding)."""
