"""Exception types raised across the package."""


class MvfError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(MvfError, ValueError):
    pass


class InconsistentMapping(MvfError, ValueError):
    pass


class TruncatedFile(MvfError, ValueError):
    pass


class NonFiniteValue(MvfError, ValueError):
    def __init__(self, message, record_index=None):
        super().__init__(message)
        self.record_index = record_index


class DegenerateAnchor(MvfError, ValueError):
    pass


class NonFiniteLoss(MvfError, ArithmeticError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
