"""Exception hierarchy shared by all modules."""


class M2MError(ValueError):
    """Base class for domain errors raised by this package."""


class ValidationError(M2MError):
    """A metric or measure failed its invariants."""


class NonZeroDiagonal(ValidationError):
    pass


class Asymmetric(ValidationError):
    pass


class NegativeEntry(ValidationError):
    pass


class TriangleViolation(ValidationError):
    def __init__(self, msg, witness=None):
        super().__init__(msg)
        self.witness = witness


class UnmappedPoint(M2MError):
    pass


class IndexOutOfRange(M2MError, IndexError):
    pass


class PreconditionViolated(M2MError):
    pass


class InvalidSpec(M2MError):
    pass


class BudgetExceeded(M2MError):
    """Exact enumeration would exceed the configured tuple budget."""


class SupportTooLarge(BudgetExceeded):
    """Subset enumeration for the Prokhorov oracle is out of budget."""


class OptimizerBudgetExceeded(BudgetExceeded):
    """Raised by the d2GP optimizer; ``bound`` holds the still-valid interval."""

    def __init__(self, msg, bound=None):
        super().__init__(msg)
        self.bound = bound


class UnknownLeaf(M2MError, KeyError):
    pass


class UnknownSpecies(M2MError, KeyError):
    pass


class DegenerateParams(M2MError):
    pass


class ParseError(M2MError):
    """Malformed input file; the message names the line or field."""
