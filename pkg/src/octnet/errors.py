"""Exception hierarchy shared across the package."""


class OctNetError(Exception):
    """Base class for all package errors."""


class ShapeError(OctNetError, ValueError):
    """Tensor shapes are incompatible with an operation or layer."""


class SpecError(OctNetError, ValueError):
    """A kernel/pool specification yields an invalid output size."""


class ParameterError(OctNetError, ValueError):
    """A scalar hyper-parameter is outside its valid range."""


class ContractError(OctNetError, RuntimeError):
    """A call violated an API contract (stale cache, unnormalized rows, ...)."""


class LabelError(OctNetError, ValueError):
    """Labels are out of range or not one-hot."""


class NumericError(OctNetError, FloatingPointError):
    """A non-finite value appeared where finite values are required."""


class DataError(OctNetError, IOError):
    """Dataset layout or file decoding problem."""


class TrainingDivergedError(NumericError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class CheckpointError(OctNetError, IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class IntegrityError(OctNetError, ValueError):
    """An embedded fixture failed validation."""
