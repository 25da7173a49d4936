"""
Exception hierarchy for the targeted detector.
"""
from typing import Optional


class TargetedDetectorError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(TargetedDetectorError, ValueError):
    """Tensor shapes or configured sizes do not agree."""


class VocabularyError(TargetedDetectorError, IndexError):
    """An index is outside the range of a lookup table or class head."""


class TapeError(TargetedDetectorError, RuntimeError):
    """Misuse of a gradient tape (non-scalar loss, reused tape)."""


class NonFiniteError(TargetedDetectorError, FloatingPointError):
    """A NaN or infinity appeared where only finite values are allowed."""


class OptimizerError(TargetedDetectorError, RuntimeError):
    """The optimizer was stepped without gradients."""


class AssignmentError(TargetedDetectorError, ValueError):
    """A matching between prediction slots and ground truths is invalid."""


class SamplingError(TargetedDetectorError, ValueError):
    """Target sampling cannot be carried out with the given inputs."""


class CheckpointError(TargetedDetectorError, ValueError):
    """A checkpoint is unreadable or does not fit the model."""


class ConfigError(TargetedDetectorError, ValueError):
    """A configuration file or override is invalid."""


class DatasetError(TargetedDetectorError, ValueError):
    """A dataset or sample stream is empty where data is required."""


class AnnotationError(TargetedDetectorError, ValueError):
    """An annotation or targeted-dataset file is malformed."""

    def __init__(
        self,
        message: str,
        *,
        line: Optional[int] = None,
        image_id: Optional[int] = None,
    ) -> None:
        self.line = line
        self.image_id = image_id
        details = []
        if line is not None:
            details.append(f"line {line}")
        if image_id is not None:
            details.append(f"image_id {image_id}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)
