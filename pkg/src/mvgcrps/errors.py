"""Exception hierarchy shared by all modules."""


class MVGError(Exception):
    """Base class for every error raised by this package."""


class NonSymmetric(MVGError, ValueError):
    pass


class NoConvergence(MVGError, RuntimeError):
    pass


class NotPositiveDefinite(MVGError, ValueError):
    pass


class DimensionMismatch(MVGError, ValueError):
    pass


class ShapeMismatch(MVGError, ValueError):
    pass


class NonFinite(MVGError, FloatingPointError):
    pass


class SingularDesign(MVGError, ValueError):
    """OLS design is rank deficient; callers report the baseline as N/A."""


class ParseError(MVGError, ValueError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class IrregularFrequency(MVGError, ValueError):
    pass


class InsufficientHistory(MVGError, ValueError):
    pass


class Diverged(MVGError, RuntimeError):
    """Training loss stayed non-finite; the run is reported as N/A."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


# eig_sym failures surface under this name in the scoring layer
EigFailure = NoConvergence
