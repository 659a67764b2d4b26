"""Exception hierarchy shared across the package."""


class PimoeError(Exception):
    """Base class for all package errors."""


class InvalidArgument(PimoeError):
    """An argument violates a documented precondition."""


class InvalidDataset(PimoeError):
    """A dataset is empty or structurally unusable."""


class InsufficientData(PimoeError):
    """Not enough points/cycles/history to perform the operation."""


class OutOfRange(PimoeError):
    """A voltage or capacity window falls outside the measured curve."""


class MalformedCycle(PimoeError):
    """A cycle's charge segment cannot be repaired into a monotone curve."""


class InsufficientRelaxation(PimoeError):
    """The recorded rest period is shorter than the requested window."""


class HorizonTooLong(PimoeError):
    """The forecast horizon exceeds the available cycle count."""


class NotFitted(PimoeError):
    """A transform was applied before being fitted."""


class ShapeError(PimoeError):
    """Tensor or array shapes are incompatible."""


class GraphError(PimoeError):
    """Backward pass requested without a recorded forward graph."""


class TrainingDiverged(PimoeError):
    """A non-finite loss was produced during training."""


class ModelContractError(PimoeError):
    """An input does not match the model's recorded dimensions or mode."""


class IncompatibleCheckpoint(PimoeError):
    """Checkpoint version is not supported by this build."""


class ChecksumError(PimoeError):
    """Checkpoint blob is truncated or corrupt."""


class CalibrationAmbiguous(PimoeError):
    """Two degradation stages calibrated to the same expert."""


class Underdetermined(PimoeError):
    """Fewer observations than free coefficients in a least-squares fit."""


class IngestError(PimoeError):
    """A CSV row or file violates the ingestion schema."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ConfigError(PimoeError):
    """A run configuration document failed validation."""
