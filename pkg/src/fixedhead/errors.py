"""Exception hierarchy shared by every module.

The CLI maps any :class:`FixedHeadError` to exit code 1 and prints the class
name, so each class name doubles as the user-facing error case.
"""


class FixedHeadError(Exception):
    """Base class for domain errors."""


class DimensionMismatch(FixedHeadError, ValueError):
    pass


class RankDeficient(FixedHeadError):
    pass


class NotStochastic(FixedHeadError, ValueError):
    pass


class DimensionTooSmall(FixedHeadError):
    """Raised when d < n: no exact realization exists in general."""


class InvalidTarget(FixedHeadError, ValueError):
    pass


class ConstructionFailed(FixedHeadError):
    pass


class MisclassifiedInput(FixedHeadError):
    pass


class DegenerateDirection(FixedHeadError):
    pass


class WitnessNotFound(FixedHeadError):
    pass


class Diverged(FixedHeadError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss!r}) at step {step}")
        self.step = step
        self.loss = loss
