"""Exception types raised by the solvers and the refinement loop."""


class CalibrationError(Exception):
    """Base class for calibration failures."""


class DegenerateError(CalibrationError, ValueError):
    """Point configuration does not determine a pose."""


class RansacError(CalibrationError, RuntimeError):
    """No hypothesis gathered enough inliers."""


class RefinementError(CalibrationError, RuntimeError):
    """Iterative refinement produced no pose at all."""


class InsufficientDataError(CalibrationError, ValueError):
    """Too few correspondences or instances to proceed."""
