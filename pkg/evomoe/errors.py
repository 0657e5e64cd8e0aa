class EvoMoEError(Exception):
    """Base class for every error raised by the lab."""


class ShapeError(EvoMoEError):
    pass


class ParameterError(EvoMoEError):
    pass


class ConfigError(EvoMoEError):
    pass


class EmptyBatchError(EvoMoEError):
    pass


class NonFiniteError(EvoMoEError):
    """An op produced NaN or Inf from its inputs."""


class PhaseError(EvoMoEError):
    """A call that is illegal in the current training phase."""


class InvariantViolation(EvoMoEError):
    pass


class CheckpointError(EvoMoEError):
    pass


class TraceFormatError(EvoMoEError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class TrainingAborted(EvoMoEError):
    """Raised after a numerical failure, once the diagnostic snapshot is on disk."""

    def __init__(self, iteration, snapshot_path, cause):
        super().__init__(f"training aborted at iteration {iteration}: {cause} (snapshot: {snapshot_path})")
        self.iteration = iteration
        self.snapshot_path = snapshot_path
        self.cause = cause
