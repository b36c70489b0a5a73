"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigurationError -> 1,
DataError -> 2, everything else -> 3.
"""


class MilexplainError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(MilexplainError):
    """Invalid configuration value; the message names the offending field."""


class DataError(MilexplainError):
    """Dataset-level problem (empty class, schema mismatch, missing files)."""


class ShapeError(MilexplainError):
    """Tensor/map shape mismatch; the message identifies the offender."""


class FormatVersionError(DataError):
    """Serialized artifact carries an unsupported format version."""


class TrainingDivergedError(MilexplainError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class PropagationError(MilexplainError):
    """Relevance propagation hit a layer without a registered rule."""


class OptimizationError(MilexplainError):
    """Mask optimization produced a non-finite loss."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at optimization step {step}")


class MatchingFailedError(MilexplainError):
    """Adversarial distribution matching collapsed for an instance."""

    def __init__(self, instance_id: str, message: str = ""):
        self.instance_id = instance_id
        super().__init__(message or f"distribution matching failed for instance {instance_id}")
