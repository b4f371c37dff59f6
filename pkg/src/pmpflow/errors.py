"""Exception hierarchy shared by all analysis modules."""


class PMPError(Exception):
    """Base class for every error raised by :mod:`pmpflow`."""


class DimensionMismatch(PMPError, ValueError):
    pass


class NonConvergence(PMPError):
    """Newton iteration for the pointwise minimizer hit its iteration cap."""


class SingularLuu(PMPError):
    """``L_uu`` is not invertible, so the convexity assumption is violated."""


class StepSizeUnderflow(PMPError):
    """The integrator step collapsed before the escape radius was reached.

    This signals stiffness rather than blow-up and is kept distinct from an
    escaped arc on purpose.
    """


class EscapedArc(PMPError):
    """An operation that needs a complete arc received an escaped one."""

    def __init__(self, z, tau):
        self.z = z
        self.tau = tau
        super().__init__(f"backward arc from z={z!r} escaped at t={tau:.6g}")


class EscapedNeighborhood(PMPError):
    """A finite-difference stencil around ``z`` left the domain of complete arcs."""


class NoRootFound(PMPError):
    """No extremal from the search box reaches the requested initial point."""


class BudgetExhausted(PMPError):
    """``perturb_until_generic`` used all draws without reaching genericity."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class BoundViolated(PMPError):
    def __init__(self, check):
        self.check = check
        super().__init__(f"a-priori bound violated: {check.failures}")


class ConfigError(PMPError):
    pass
