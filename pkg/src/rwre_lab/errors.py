"""Exception types shared across the package.

Estimators raise rather than silently repair: a validation failure here means
the caller's model, sample, or budget is unusable for the requested quantity.
"""


class RwreError(Exception):
    """Base class for package errors."""


class DimensionMismatch(RwreError):
    """Objects built for different lattice dimensions were combined."""


class SimplexViolation(RwreError):
    """Probability vector entries are negative or do not sum to one."""


class EllipticityViolation(RwreError):
    """A transition probability falls below the model's ellipticity floor."""


class EmptyPath(RwreError):
    """An operation needs at least one step."""


class ZeroProbabilityStep(RwreError):
    """A likelihood ratio met a step the reference kernel cannot take."""


class TooFewRegenerations(RwreError):
    """Block extraction needs at least two confirmed regeneration times."""


class NestlingWithoutOverride(RwreError):
    """Block sampling on a nestling model requires an explicit override."""


class InsufficientSamples(RwreError):
    """Too few samples for the requested diagnostic."""


class BracketFailure(RwreError):
    """Root bracket does not enclose a sign change."""


class NonfiniteWeight(RwreError):
    """A block weight overflowed or became NaN."""


class DegenerateDenominator(RwreError):
    """A ratio estimator's denominator is numerically zero."""


class NoConvergence(RwreError):
    """An iterative solve exhausted its iteration budget."""


class MissingNeighbor(RwreError):
    """A kernel row needs an h value its source could not provide."""


class NonpositiveH(RwreError):
    """An h estimate is zero or negative (undersampled), refusing to tilt."""


class HorizonExhausted(RwreError):
    """No walk reached the target level within the step cap."""


class BudgetExhausted(RwreError):
    """A sampling budget ran out before the requested sample was complete."""


class WindowViolation(RwreError):
    """An observable touched environment or steps outside its declared window."""


class EmptyMeasure(RwreError):
    """An empirical measure with no mass cannot be normalized."""


class ZeroBaseProbability(RwreError):
    """Entropy against a base kernel entry that is zero (violates ellipticity)."""


class TooLarge(RwreError):
    """Exact enumeration was asked for an infeasible path count."""


class CorruptEntry(RwreError):
    """A cache entry failed its checksum."""


class TaskError(RwreError):
    """A parallel task failed; carries the task index."""

    def __init__(self, task_id, message=""):
        self.task_id = task_id
        super().__init__(f"task {task_id} failed" + (f": {message}" if message else ""))
