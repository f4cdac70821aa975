"""Exception hierarchy shared across the pipeline."""


class VoriskError(Exception):
    """Base class for all package errors."""


class ConfigError(VoriskError):
    """Invalid or missing configuration value."""


class DegenerateGeometryError(VoriskError):
    """Scenario never observes enough landmarks in some frame."""


class BehindCameraError(VoriskError):
    """Projection requested for a point with non-positive depth."""


class InsufficientParallaxError(VoriskError):
    """Triangulation normal matrix too ill-conditioned to invert."""


class RankDeficientError(VoriskError):
    """A landmark block of the normal matrix is singular before damping."""


class PoseBlockSingularError(VoriskError):
    """Cholesky of the damped pose block failed during marginalization."""


class ZeroJacobianError(VoriskError):
    """Condition number requested for an identically zero Jacobian."""


class DivergedError(VoriskError):
    """Levenberg-Marquardt cost increased through the full damping ladder."""


class WindowUnderflowError(VoriskError):
    """Sliding window would shrink below two poses."""


class InsufficientCalibrationError(VoriskError):
    """Too few clean samples to calibrate the risk threshold."""


class SingleClassError(VoriskError):
    """ROC AUC requested with only one label class present."""


class MalformedRecordError(VoriskError):
    """A frame-log line failed to parse."""

    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class AsymmetricMatrixError(MalformedRecordError):
    """A matrix stored as symmetric violated the symmetry tolerance."""
