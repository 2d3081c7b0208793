"""Shared exception types."""


class DimensionMismatchError(ValueError):
    """Input shape does not match what the component was built for."""


class NonFiniteGradientError(FloatingPointError):
    """Optimizer step rejected because a gradient was NaN/inf."""


class EpisodeDoneError(RuntimeError):
    """step() called on a finished episode before reset()."""


class CorruptArchiveError(ValueError):
    """Rollout archive is truncated or fails to parse."""


class ArchiveVersionError(CorruptArchiveError):
    """Rollout archive carries an unsupported schema version."""


class EmptyStoreError(ValueError):
    """Nearest-state query against an empty rollout store."""


class TrainingFailureError(RuntimeError):
    """Training finished its budget without meeting the success gate."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
