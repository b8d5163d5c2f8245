"""Exception hierarchy shared by the solver modules."""


class MMFGError(Exception):
    """Base class for all solver errors."""


class PreconditionError(MMFGError, ValueError):
    pass


class ConfigurationError(MMFGError, ValueError):
    pass


class SingularMeanError(MMFGError, ArithmeticError):
    """An ensemble mean fell below the division floor."""


class SingularControlError(MMFGError, ArithmeticError):
    """The minor player's Hamiltonian lost strong convexity (alpha0 too close to 0)."""


class SeparabilityError(MMFGError):
    """The averaged major Hamiltonian couples alpha0 and alpha."""


class OptimizationError(MMFGError):
    def __init__(self, message, last_iterate=None, grad_norm=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.grad_norm = grad_norm


class DivergenceError(MMFGError, FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class BasisDegeneracyError(MMFGError, ArithmeticError):
    pass


class NonConvergenceError(MMFGError):
    def __init__(self, message, residuals=()):
        super().__init__(message)
        self.residuals = list(residuals)


class FixedPointError(NonConvergenceError):
    pass
