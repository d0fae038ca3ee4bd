"""Exception hierarchy shared across the package."""


class HLVAEError(Exception):
    """Base class for all errors raised by this package."""


# numerics

class NonFiniteError(HLVAEError, ArithmeticError):
    """A forward operation produced a non-finite value."""


class FactorizationFailure(HLVAEError, ArithmeticError):
    """Cholesky factorization failed even after jitter escalation."""


class SingularTriangular(HLVAEError, ArithmeticError):
    pass


class NotScalar(HLVAEError, ValueError):
    pass


class ShapeMismatch(HLVAEError, ValueError):
    pass


# data

class SchemaMismatch(HLVAEError, ValueError):
    pass


class DomainViolation(HLVAEError, ValueError):
    """An observed value lies outside its feature's likelihood domain."""


class MissingCovariate(HLVAEError, ValueError):
    pass


class TooFewVisits(HLVAEError, ValueError):
    pass


class DegenerateFeature(UserWarning):
    """An observed training column is constant; its scale was replaced by 1."""


# kernels / inference

class KernelSyntaxError(HLVAEError, ValueError):
    pass


class UnknownCovariate(HLVAEError, KeyError):
    pass


class NotSorted(HLVAEError, ValueError):
    pass


class MissingIndividualComponent(HLVAEError, ValueError):
    pass


class IncompleteInstance(HLVAEError, ValueError):
    pass


class UnknownInstance(HLVAEError, KeyError):
    pass


class NonFiniteLoss(HLVAEError, ArithmeticError):
    """Training produced a non-finite objective.

    ``model`` holds the parameters from the last finite step and ``history``
    the epochs completed before the failure.
    """

    def __init__(self, message, model=None, history=None):
        super().__init__(message)
        self.model = model
        self.history = history


# evaluation

class EmptyHoldout(HLVAEError, ValueError):
    pass
