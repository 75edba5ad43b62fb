"""Exception hierarchy. Everything derives from ``ValueError`` so callers
that only care about bad input can catch that."""


class MetashiftError(ValueError):
    pass


class InvalidInputError(MetashiftError):
    pass


class InvalidParameterError(MetashiftError):
    pass


class InsufficientDataError(MetashiftError):
    pass


class SupportViolationError(MetashiftError):
    """Target mass placed on a meta-label the source never produces."""


class DegenerateError(MetashiftError):
    pass


class UndefinedMetricError(MetashiftError):
    pass


class SpecValidationError(MetashiftError):
    pass


class NumericalFailureError(ArithmeticError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
