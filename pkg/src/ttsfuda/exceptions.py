"""Exception types raised by ttsfuda."""


class ConfigError(ValueError):
    """Invalid hyperparameters, architecture or experiment configuration.

    ``errors`` holds every problem found, so callers can report them together.
    """

    def __init__(self, message, errors=None):
        self.errors = list(errors) if errors else [message]
        super().__init__(message)


class ShapeError(ValueError):
    """Array shapes are incompatible with the operation or the network."""


class CheckpointError(ValueError):
    """A checkpoint file could not be parsed."""


class IncompatibleCheckpointError(CheckpointError):
    """A checkpoint parsed fine but does not fit the requested context."""


class TrainingDivergedError(RuntimeError):
    """A training loss became NaN or infinite."""


class DatasetError(ValueError):
    """Dataset files are missing, malformed or inconsistent."""
