"""Exception hierarchy shared by all modules."""


class HeisenbergSDEError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(HeisenbergSDEError, ValueError):
    pass


class InvalidParam(HeisenbergSDEError, ValueError):
    pass


class SingularTheta(HeisenbergSDEError, ValueError):
    pass


class DegenerateG(HeisenbergSDEError, ValueError):
    pass


class NonFinite(HeisenbergSDEError, FloatingPointError):
    pass


class OffGridTime(HeisenbergSDEError, ValueError):
    pass


class GridMismatch(HeisenbergSDEError, ValueError):
    pass


class NearSingularQ(HeisenbergSDEError, FloatingPointError):
    """Too many paths needed regularisation of the Malliavin covariance."""


class BudgetExceeded(HeisenbergSDEError, RuntimeError):
    pass


class NonIntegrable(HeisenbergSDEError, ValueError):
    pass


class UnsupportedBeta(HeisenbergSDEError, ValueError):
    pass


class DegenerateWeights(HeisenbergSDEError, RuntimeError):
    """Effective sample size of the importance weights collapsed."""


class ZeroNorm(HeisenbergSDEError, ZeroDivisionError):
    pass


class NoContraction(HeisenbergSDEError, RuntimeError):
    """Picard increments stopped shrinking; raise lambda."""


class PathEscaped(HeisenbergSDEError, RuntimeError):
    def __init__(self, message, residual=None, stopped_at=None):
        super().__init__(message)
        self.residual = residual
        self.stopped_at = stopped_at


class InsufficientSamples(HeisenbergSDEError, ValueError):
    pass


class ConfigInvalid(HeisenbergSDEError, ValueError):
    pass
