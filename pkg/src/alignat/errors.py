"""Exception types shared across the package.

The CLI maps these onto stable exit codes: usage errors exit 1, I/O and
format errors exit 2, infeasible-data errors exit 3.
"""


class AlignatError(Exception):
    """Base class for package errors."""


class ShapeMismatchError(AlignatError):
    """Operands disagree on a dimension they must share."""


class FullyMaskedRowError(AlignatError):
    """An attention mask row permits no keys; the output row would be undefined."""


class GraphError(AlignatError):
    """Misuse of the autodiff tape (e.g. backward called twice without reset)."""


class InfeasibleSequenceError(AlignatError):
    """Reference does not fit the frame budget of the lattice."""


class NoTokensError(AlignatError):
    """An all-blank alignment triggered no tokens."""


class CorruptRecordError(AlignatError):
    """On-disk record failed validation.

    Carries ``offset`` (byte position of the failure) when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class CheckpointError(AlignatError):
    """Checkpoint file is malformed or does not match the model."""


class DivergenceError(AlignatError):
    """A parameter update produced a non-finite gradient; carries diagnostics."""
