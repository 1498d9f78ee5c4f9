"""Exception types shared across the toolkit."""


class ReiError(Exception):
    """Base class for all toolkit errors."""


# graph errors
class CycleError(ReiError):
    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("edge list induces the cycle " + " -> ".join(map(str, self.cycle)))


class UnknownNodeError(ReiError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class DuplicateEdgeError(ReiError):
    pass


class OverlapError(ReiError):
    pass


# probability engine errors
class StateSpaceTooLarge(ReiError):
    pass


class ZeroProbabilityEvidence(ReiError):
    pass


class BadStateError(ReiError):
    pass


class NotAColliderError(ReiError):
    """Raised when a model fails the graphical conditions for collider adjustment.

    ``conditions`` lists the names of the failing conditions.
    """

    def __init__(self, message, conditions=()):
        self.conditions = list(conditions)
        super().__init__(message)


class ModelShapeError(ReiError):
    pass


# autodiff / model errors
class ShapeMismatch(ReiError):
    pass


class NonScalarLoss(ReiError):
    pass


class EmptySampler(ReiError):
    pass


class EmptyDataset(ReiError):
    pass


# data / metric errors
class BadSpec(ReiError):
    pass


class DegenerateData(ReiError):
    pass


class AllRowsInactive(ReiError):
    pass
