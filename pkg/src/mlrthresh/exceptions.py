"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures
onto its documented exit statuses (2 validation, 3 budget, 4 numerical).
"""


class MLRError(Exception):
    exit_code = 4


class ValidationError(MLRError, ValueError):
    exit_code = 2


class DomainError(ValidationError):
    pass


class FeasibilityError(ValidationError):
    pass


class HypothesisError(ValidationError):
    pass


class UnsupportedNoise(ValidationError):
    pass


class InfeasibleBudget(MLRError):
    exit_code = 3

    def __init__(self, message, rate=None, required=None):
        super().__init__(message)
        self.rate = rate
        self.required = required


class NumericalError(MLRError, ArithmeticError):
    exit_code = 4


class EmptySelectionError(NumericalError):
    pass


class RankError(NumericalError):
    pass


class DegenerateClusterError(NumericalError):
    pass


class NearZeroMeanError(NumericalError):
    pass


class SmallClusterError(NumericalError):
    pass


class SignError(NumericalError):
    pass


class SingularSystemError(NumericalError):
    pass
