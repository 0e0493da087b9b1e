"""Exception types shared across the package."""


class HlodeError(Exception):
    """Base class for all package errors."""


class NoInfectedEquilibrium(HlodeError):
    """The parameter point has no positive (infected) steady state."""


class StepSizeUnderflow(HlodeError):
    """The adaptive integrator needed a step below the minimum step size."""


class DomainError(HlodeError):
    """An observation transform was applied outside its domain."""


class FiniteDifferenceFailure(HlodeError):
    """A finite-difference stencil kept hitting infeasible points."""


class DampingOverflow(HlodeError):
    """Too many consecutive rejected Marquardt trials."""


class NonConvergence(HlodeError):
    """The optimizer stopped without meeting the convergence criteria."""

    def __init__(self, message, report=None, result=None):
        super().__init__(message)
        self.report = report
        self.result = result


class SingularInnerBlock(HlodeError):
    """The random-effect curvature block of a subject could not be inverted."""


class TooFewConverged(HlodeError):
    """Not enough bootstrap replicates converged to form a bias estimate."""


class ConfigError(HlodeError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
