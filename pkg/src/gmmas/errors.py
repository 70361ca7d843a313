"""Shared exception types."""


class ValidationError(ValueError):
    """Input violates a documented precondition or invariant."""


class VolumeIOError(IOError):
    """A volume or mask file could not be read or written."""


class ConfigurationError(ValueError):
    """A run configuration is malformed or internally inconsistent."""


class TrainingStepError(RuntimeError):
    """A training step produced a non-finite loss."""

    def __init__(self, task: str, message: str = ""):
        self.task = task
        super().__init__(message or f"non-finite loss for task '{task}'")
