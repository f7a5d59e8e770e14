"""Exception hierarchy shared by every module."""


class DualFlowError(Exception):
    """Base class for all errors raised by dualflow."""


class OutOfDomainError(DualFlowError, ValueError):
    """A time, knot or particle lies outside the domain of the object queried."""


class UnsupportedConfigurationError(DualFlowError, ValueError):
    """The requested operation is not available for this space/functional pair."""


class InfeasibleError(DualFlowError, ValueError):
    """Input data violates a feasibility requirement (e.g. unequal total mass)."""


class GridMismatchError(DualFlowError, ValueError):
    """Two grid functions live on different grids."""


class StepFailure(DualFlowError, RuntimeError):
    """An inner proximal solve did not reach its certificate tolerance."""

    def __init__(self, message, residual=float("nan"), step_index=None):
        super().__init__(message)
        self.residual = residual
        self.step_index = step_index


class ParticleEscapeError(DualFlowError, RuntimeError):
    """A generator particle left the discriminator grid."""
