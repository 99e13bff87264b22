"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class FormatError(ValueError):
    """Input data has the wrong layout (e.g. non-uniform sampling)."""


class IntegrationError(RuntimeError):
    """The master-equation integrator failed to meet its tolerance."""

    def __init__(self, message, time=None):
        super().__init__(message if time is None else f"{message} (t = {time:.6e} s)")
        self.time = time


class CalibrationError(RuntimeError):
    """A calibration search could not bracket its optimum."""


class FitError(RuntimeError):
    """A fit could not be carried out (too few points, singular system)."""


class UndefinedSnrError(ZeroDivisionError):
    """SNR requested with zero reference noise counts."""


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""

    def __init__(self, message, key_path=""):
        super().__init__(f"{key_path}: {message}" if key_path else message)
        self.key_path = key_path
