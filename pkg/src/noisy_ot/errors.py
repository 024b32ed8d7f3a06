"""Exception hierarchy shared by every module."""


class NoisyOTError(Exception):
    """Base class for library errors."""


class DimensionError(NoisyOTError, ValueError):
    """Array shapes or support sizes do not agree."""


class DomainError(NoisyOTError, ValueError):
    """An argument lies outside the domain of an operation."""


class InvalidChannelError(DomainError):
    """Kernel rows do not form probability measures."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class NoFeasiblePlanError(NoisyOTError):
    """No transport plan with finite cost couples the given marginals."""


class InfeasibleFormulationError(NoisyOTError):
    """The ambiguity set of a robust formulation is empty."""


class ValidationError(NoisyOTError, ValueError):
    """An experiment configuration failed validation."""

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = list(errors or [])


class NonConvergenceError(NoisyOTError):
    """An iterative solver hit its iteration cap without meeting tolerance."""
