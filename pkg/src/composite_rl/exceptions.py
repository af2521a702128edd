"""Exception types raised across the package."""


class StructuralViolation(ValueError):
    """A transition kernel is not a probability distribution."""


class SingularKernelError(ValueError):
    """The next-state feature Gram matrix is too ill-conditioned to invert."""


class IncoherenceBudgetError(RuntimeError):
    """No low-rank core met the incoherence budget within the retry cap."""


class InfeasiblePerturbationError(RuntimeError):
    """A sparse mass-transfer perturbation could not be placed."""


class AssumptionViolation(ValueError):
    """A generated instance breaks a structural assumption and no override was given."""
