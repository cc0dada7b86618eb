class GraphMatchingError(Exception):
    """Base class for every error raised by this package."""


class InvalidProbabilityError(GraphMatchingError, ValueError):
    """A probability argument lies outside its admissible interval."""


class ShapeMismatchError(GraphMatchingError, ValueError):
    """Operands of a primitive or layer have incompatible shapes."""


class NumericFaultError(GraphMatchingError):
    """A computation produced non-finite values."""

    def __init__(self, message: str, fault: str = ""):
        super().__init__(message)
        self.fault = fault


class GroundTruthNotInSupportError(GraphMatchingError):
    """The ground-truth target of a source node is not stored in a sparse correspondence."""


class ProblemTooLargeError(GraphMatchingError, ValueError):
    """An exhaustive oracle was asked to enumerate too many permutations."""


class ConstraintViolationError(GraphMatchingError, ValueError):
    """A binary matching is not a partial injection."""


class ConfigError(GraphMatchingError):
    """An experiment configuration could not be parsed or validated."""


class CheckpointError(GraphMatchingError):
    """A checkpoint file is missing, malformed, or of an unsupported version."""
