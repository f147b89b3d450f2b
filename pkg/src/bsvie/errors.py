"""Exception hierarchy shared by all modules."""


class BSVIEError(Exception):
    """Base class for every error raised by this package."""


class InvalidParameter(BSVIEError, ValueError):
    pass


class NumericError(BSVIEError, ArithmeticError):
    pass


class ContractionViolated(BSVIEError):
    """The weighted kernel norm L(lambda) is too large for the contraction argument."""

    def __init__(self, L_lambda, threshold=0.5):
        self.L_lambda = float(L_lambda)
        self.threshold = float(threshold)
        super().__init__(
            f"contraction condition violated: L(lambda)={self.L_lambda:.6g} "
            f">= {self.threshold:g} (A2)"
        )


class SingularSystem(NumericError):
    pass


class MeasureDegenerate(BSVIEError):
    """1 + beta <= 0 somewhere, so the jump density is not positive."""


class Divergent(BSVIEError):
    pass


class NoConvergence(BSVIEError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class InstabilityDetected(BSVIEError):
    pass


class AssumptionViolated(BSVIEError):
    """A standing assumption (A1, A2 or A3) failed at problem construction.

    ``report`` is a machine-readable dict naming the assumption.
    """

    def __init__(self, assumption, message, report=None):
        self.assumption = assumption
        self.report = dict(report or {})
        self.report.setdefault("assumption", assumption)
        self.report.setdefault("message", message)
        super().__init__(f"{assumption}: {message}")


class RegressionSingular(UserWarning):
    """Emitted when a regression design is rank deficient and the degree is lowered."""
