"""Custom exceptions for the qgml project."""


class QgmlError(Exception):
    """Base class for exceptions in this project."""


class ConfigurationError(QgmlError):
    """Exception raised for configuration-related problems."""


class GridMismatchError(QgmlError):
    """Exception raised when an array does not conform to the grid it is used with."""


class HorizonError(QgmlError):
    """Exception raised when a duration is not a whole number of steps or windows."""


class CflViolationError(QgmlError):
    """Exception raised when a departure displacement spans a full domain length."""


class ModelBlowUpError(QgmlError):
    """Exception raised when the integrated state stops being finite."""

    def __init__(self, step_index: int, window_index: int | None = None) -> None:
        """
        Initialize a ModelBlowUpError for the offending step.

        Parameters:
            step_index (int): Number of steps taken when the non-finite state appeared.
            window_index (int, optional): Assimilation window in which it happened, if known.
        """
        where = f"step {step_index}"
        if window_index is not None:
            where = f"window {window_index}, {where}"
        super().__init__(f"Non-finite model state at {where}")
        self.step_index = step_index
        self.window_index = window_index


class ObservationError(QgmlError):
    """Exception raised for invalid observation locations, batches or truth coverage."""


class NetworkSpecError(QgmlError):
    """Exception raised for a network whose layer shapes do not chain."""


class TrainingDivergedError(QgmlError):
    """Exception raised when the training loss becomes non-finite."""

    def __init__(self, epoch: int) -> None:
        super().__init__(f"Training loss became non-finite at epoch {epoch}")
        self.epoch = epoch


class DatasetTooShortError(QgmlError):
    """Exception raised when a trajectory cannot supply the requested number of samples."""

    def __init__(self, requested: int, max_feasible: int) -> None:
        super().__init__(
            f"Trajectory supports at most {max_feasible} samples, {requested} requested"
        )
        self.requested = requested
        self.max_feasible = max_feasible


class ZeroVarianceError(QgmlError):
    """Exception raised when normalization statistics have zero spread."""


class NoExponentialRegimeError(QgmlError):
    """Exception raised when no exponential error-growth segment can be found."""


class DependencyError(QgmlError):
    """Exception raised when an upstream artifact is missing."""

    def __init__(self, missing: str, producer: str) -> None:
        super().__init__(f"Missing {missing}; run `qgml {producer}` first")
        self.missing = missing
        self.producer = producer


class ArtifactFormatError(QgmlError):
    """Exception raised for unreadable or corrupted artifact files."""

    def __init__(self, message: str, underlying_error: Exception | None = None) -> None:
        """
        Initialize an ArtifactFormatError with a message and an optional underlying exception.

        Parameters:
            message (str): Description of the format problem.
            underlying_error (Exception, optional): The original exception that caused this error, if any.
        """
        super().__init__(message)
        self.underlying_error = underlying_error

    def __str__(self) -> str:
        """
        Return the string representation of the error, including the underlying cause if present.
        """
        if self.underlying_error:
            return f"{super().__str__()} (Caused by: {self.underlying_error})"
        return super().__str__()
