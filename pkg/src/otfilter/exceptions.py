"""Exception types raised across the package."""


class ContractViolation(ValueError):
    """Input violates a documented precondition (shapes, ranges, indices)."""


class NumericalError(FloatingPointError):
    """A computation produced non-finite values."""

    def __init__(self, message, step=None, node=None):
        if step is not None:
            message = f"{message} (step {step})"
        if node is not None:
            message = f"{message} (node {node})"
        super().__init__(message)
        self.step = step
        self.node = node


class NumericalOverflowError(NumericalError):
    """State propagation left the finite range."""


class TrainingDiverged(RuntimeError):
    """Max-min training objective blew up; ``trace`` holds the loss history."""

    def __init__(self, message, trace=None, step=None):
        if step is not None:
            message = f"{message} (filter step {step})"
        super().__init__(message)
        self.trace = trace if trace is not None else []
        self.step = step


class DegeneracyError(RuntimeError):
    """All importance weights vanished."""

    def __init__(self, max_log_weight):
        super().__init__(f"importance weights degenerate; max log-weight {max_log_weight!r}")
        self.max_log_weight = max_log_weight


class ConjugateUndefinedError(ValueError):
    """Convex conjugate requested for a singular quadratic."""


class ExtrapolationError(ValueError):
    """Evaluation point lies outside a tabulated quadrature grid."""


class InvalidRegimeError(ValueError):
    """Hessian-bound recursion left its valid (positive) regime."""


class LinAlgError(ArithmeticError):
    """Covariance inversion failed even after jitter."""


class ConfigError(ValueError):
    """Configuration could not be parsed or validated.

    ``problems`` lists every violation found, one string each.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
