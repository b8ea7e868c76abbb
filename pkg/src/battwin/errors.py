"""Exception types shared across the battwin package."""


class BattwinError(Exception):
    """Base class for all battwin errors."""


class ParameterError(BattwinError):
    """A cell parameter failed validation.  Carries the offending field name."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"parameter '{field}': {message}")


class SolverError(BattwinError):
    """Newton iteration failed to converge, including all time-step retries."""

    def __init__(self, message: str, residual: float | None = None, time: float | None = None):
        self.residual = residual
        self.time = time
        detail = message
        if residual is not None:
            detail += f" (last residual {residual:.3e})"
        if time is not None:
            detail += f" at t={time:.3f}s"
        super().__init__(detail)


class PhysicalityError(BattwinError):
    """A converged step left the physically admissible region."""


class DimensionError(BattwinError):
    """Tensor shapes passed to a layer operation are inconsistent."""


class OptimizerError(BattwinError):
    """Optimizer saw a non-finite gradient."""


class DataFormatError(BattwinError):
    """A dataset or checkpoint file is malformed.  Carries a byte offset when known."""

    def __init__(self, message: str, byte_offset: int | None = None):
        self.byte_offset = byte_offset
        if byte_offset is not None:
            message += f" (byte offset {byte_offset})"
        super().__init__(message)


class DataIntegrityError(BattwinError):
    """Manifest and payload of a dataset disagree."""


class CheckpointError(BattwinError):
    """A model checkpoint could not be loaded safely."""


class TrainingError(BattwinError):
    """Training aborted, e.g. on a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None,
                 learning_rate: float | None = None):
        self.epoch = epoch
        self.batch = batch
        self.learning_rate = learning_rate
        if epoch is not None:
            message += f" (epoch {epoch}, batch {batch}, lr {learning_rate})"
        super().__init__(message)


class EstimationError(BattwinError):
    """State-of-health estimation could not produce a usable result."""
