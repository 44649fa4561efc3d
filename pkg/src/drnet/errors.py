"""Exception hierarchy shared by every module.

Each error class carries the process exit code the CLI maps it to:
3 = data/parse failure, 4 = configuration/argument failure,
5 = numeric/training failure.
"""


class DrnetError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ShapeError(DrnetError):
    """Operands have incompatible shapes (there is no broadcasting anywhere)."""

    exit_code = 4


class ArgumentError(DrnetError):
    """An argument violates an operation's precondition."""

    exit_code = 4


class ConfigError(DrnetError):
    """A configuration value or combination is invalid."""

    exit_code = 4


class SelectionError(DrnetError):
    """Training-sample selection cannot satisfy its constraints."""

    exit_code = 4


class DataFormatError(DrnetError):
    """A file or stream does not parse.  `offset` is a byte offset when known."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(DataFormatError):
    """A checkpoint file cannot be loaded."""


class CheckpointMagicError(CheckpointError):
    """Checkpoint does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint ends before all declared records were read."""


class CheckpointShapeError(CheckpointError):
    """A parameter record disagrees with the checkpoint's own config."""


class NumericError(DrnetError):
    """A numeric invariant failed (non-finite value, broken monotonicity)."""

    exit_code = 5


class TrainingDivergedError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class GenerationError(DrnetError):
    """Synthetic-data generation could not meet its target."""

    exit_code = 5
