"""Exception hierarchy shared by all modules."""


class FunVarError(Exception):
    """Base class for every error raised by this package."""


class DegenerateSampleError(FunVarError, ValueError):
    pass


class InvalidBandwidthError(FunVarError, ValueError):
    pass


class DomainError(FunVarError, ValueError):
    pass


class RangeError(FunVarError, ArithmeticError):
    pass


class ShapeError(FunVarError, ValueError):
    pass


class RankError(FunVarError, ValueError):
    pass


class ConvergenceError(FunVarError, RuntimeError):
    """Iterative fit stopped at ``max_iter`` without meeting its tolerance.

    ``objective`` is the last objective value reached and ``history`` the full
    per-iteration sequence of the best restart.
    """

    def __init__(self, message, objective=None, history=None):
        super().__init__(message)
        self.objective = objective
        self.history = [] if history is None else list(history)


class NumericalError(FunVarError, ArithmeticError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class DivergenceError(NumericalError):
    pass


class InvalidConfigError(FunVarError, ValueError):
    pass


class ValidationError(FunVarError, ValueError):
    """Configuration failed validation; ``problems`` lists every violated field."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))
