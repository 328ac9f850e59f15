"""Exception hierarchy shared by all modules.

Each family maps to a distinct CLI exit code (see :mod:`dynsr.cli`).
"""


class DynSRError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigurationError(DynSRError, ValueError):
    exit_code = 2


class CFLError(DynSRError):
    """Time step violates the explicit stability bound."""

    exit_code = 3

    def __init__(self, message, row=None, courant=None):
        super().__init__(message)
        self.row = row
        self.courant = courant


class InstabilityError(DynSRError, FloatingPointError):
    """Non-finite values appeared during integration."""

    exit_code = 4

    def __init__(self, message, step=None, time=None):
        super().__init__(message)
        self.step = step
        self.time = time


class ShapeError(DynSRError, ValueError):
    exit_code = 2


class QuadratureError(DynSRError, ArithmeticError):
    exit_code = 5

    def __init__(self, message, estimates=None):
        super().__init__(message)
        self.estimates = estimates


class CoverageError(DynSRError):
    exit_code = 2


class DegenerateReferenceError(DynSRError, ZeroDivisionError):
    exit_code = 5


class TrainingError(DynSRError):
    """NaN loss during optimization."""

    exit_code = 4

    def __init__(self, message, iteration=None, batch_id=None):
        super().__init__(message)
        self.iteration = iteration
        self.batch_id = batch_id


class CheckpointError(DynSRError, IOError):
    exit_code = 6


class SnapshotError(DynSRError, IOError):
    exit_code = 6
