"""Exception and warning types raised by rbhomog."""

from typing import Optional


class RbhomogError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(RbhomogError, ValueError):
    """Invalid or inconsistent run configuration."""


class MeshError(RbhomogError, ValueError):
    """Invalid mesh data or infeasible mesh geometry."""


class MeshMismatchError(MeshError):
    """Data generated on one mesh used together with another."""


class InvertedElementError(RbhomogError, ValueError):
    """A deformation gradient with non-positive determinant was encountered."""


class DivergenceError(RbhomogError, RuntimeError):
    """Newton iterations failed after all load-step cuts were spent."""

    def __init__(self, message: str, residual: Optional[float] = None):
        super().__init__(message)
        self.residual = residual


class DegenerateDataError(RbhomogError, ValueError):
    """Snapshot data carry no usable information (e.g. all zero)."""


class FitError(RbhomogError, RuntimeError):
    """Gaussian process hyperparameter fitting failed."""


class IllConditionedError(FitError, ValueError):
    """Training inputs make the kernel matrix singular (duplicates)."""


class FormatError(RbhomogError, ValueError):
    """A file is corrupted, truncated, or written by an unsupported version."""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ExtrapolationWarning(UserWarning):
    """Surrogate evaluated outside its training box."""
