"""Exception types shared across the package.

The CLI maps these onto its exit-code contract, so raising the right
class matters more than the message text.
"""


class SeqDet3DError(Exception):
    """Base class for all package errors."""


class ConfigError(SeqDet3DError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DatasetError(SeqDet3DError):
    """Base for stored-dataset problems (CLI exit code 3)."""


class ChecksumMismatchError(DatasetError):
    """A scene file's bytes do not match the checksum in the index."""


class TruncatedFileError(DatasetError):
    """A binary file ended before its declared payload."""


class FormatError(DatasetError):
    """Bad magic bytes or otherwise unparseable binary layout."""


class VersionMismatchError(DatasetError):
    """A binary file carries an unsupported format version."""


class GenerationError(SeqDet3DError):
    """Scene synthesis could not satisfy its constraints (e.g. objects
    that cannot fit the extent after bounded rejection attempts)."""


class NonFiniteLossError(SeqDet3DError):
    """Training produced a NaN or infinite loss (CLI exit code 4)."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class CompatibilityError(SeqDet3DError):
    """Checkpoint does not match the configured model (CLI exit code 5)."""


class ShapeMismatchError(SeqDet3DError):
    """Tensor operands have incompatible shapes."""


class MissingGradientError(SeqDet3DError):
    """An optimizer step was requested before gradients were populated."""


class NondeterministicObjectiveError(SeqDet3DError):
    """A gradient-check objective returned different values on repeated
    evaluation at the same parameters."""


class MatchingError(SeqDet3DError):
    """Infeasible or oversized assignment problem."""
