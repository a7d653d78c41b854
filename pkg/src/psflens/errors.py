"""Exception types shared across the package."""


class PsfError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class AllZeroKernel(PsfError):
    pass


class WindowOutOfBounds(PsfError):
    pass


class NonDivisibleSize(PsfError):
    pass


class ShapeMismatch(PsfError):
    pass


class OutOfRange(PsfError):
    pass


class ObjectInsideFocal(PsfError):
    pass


class ValueOutOfRange(PsfError):
    pass


class DivergenceDetected(PsfError):
    pass


class FormatError(PsfError):
    """A file exists but its content is invalid, truncated or of the wrong version."""
