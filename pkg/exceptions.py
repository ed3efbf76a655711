"""
exceptions.py

Exception hierarchy shared by every module of the purification toolkit.
All errors derive from PurificationError so callers (and the CLI) can catch
one type and map subclasses to exit codes.
"""


class PurificationError(Exception):
    def __init__(self, message: str, original_error=None):
        super().__init__(message)
        self.original_error = original_error


class ArgumentError(PurificationError, ValueError):
    """Invalid argument: bad counts, shape mismatch, out-of-range step or label."""


class EmptyDatasetError(ArgumentError):
    def __init__(self, message: str = "Dataset must contain at least one sample"):
        super().__init__(message)


class UnsupportedShapeError(ArgumentError):
    def __init__(self, shape, expected: str = "image-shaped (N, 1, H, W)"):
        super().__init__(f"Unsupported sample shape {tuple(shape)}: expected {expected}")
        self.shape = tuple(shape)


class UnsupportedModeError(ArgumentError):
    def __init__(self, mode: str, reason: str):
        super().__init__(f"Mode '{mode}' unsupported: {reason}")
        self.mode = mode


class TrainingFailureError(PurificationError):
    def __init__(self, epoch: int, loss: float, model: str = "model"):
        super().__init__(f"Training of {model} diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class NumericalFailureError(PurificationError):
    def __init__(self, message: str, step=None, original_error=None):
        if step is not None:
            message = f"{message} (reverse step t={step})"
        super().__init__(message, original_error)
        self.step = step


class ConfigurationError(PurificationError):
    def __init__(self, message: str, path=None, original_error=None):
        if path is not None:
            message = f"{message}: {path}"
        super().__init__(message, original_error)
        self.path = path


class AcceptanceError(PurificationError):
    def __init__(self, failed_checks):
        self.failed_checks = list(failed_checks)
        super().__init__(f"Acceptance checks failed: {', '.join(self.failed_checks)}")


__all__ = [
    'PurificationError',
    'ArgumentError',
    'EmptyDatasetError',
    'UnsupportedShapeError',
    'UnsupportedModeError',
    'TrainingFailureError',
    'NumericalFailureError',
    'ConfigurationError',
    'AcceptanceError',
]
