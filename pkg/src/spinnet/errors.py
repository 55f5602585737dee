"""Exception hierarchy shared by every module."""


class SpinNetError(Exception):
    """Base class for all simulator errors."""

    exit_code = 1

    def __init__(self, message, *, event_index=None, set_index=None, trial_index=None):
        super().__init__(message)
        self.event_index = event_index
        self.set_index = set_index
        self.trial_index = trial_index


class InvalidConfigError(SpinNetError, ValueError):
    exit_code = 2


class InvalidStateError(SpinNetError, ValueError):
    exit_code = 3


class NumericalStateError(InvalidStateError):
    """Covariance lost symmetry or positive semidefiniteness."""


class SmallAngleError(InvalidStateError):
    """A mean spin left the small-angle region where the Gaussian frame is valid."""


class CalibrationError(SpinNetError, RuntimeError):
    exit_code = 2


class ExportError(SpinNetError, OSError):
    exit_code = 4


class GaussianValidityWarning(UserWarning):
    """Atom number too small for the large-N Gaussian description to be trusted."""
