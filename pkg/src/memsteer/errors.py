"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates a documented precondition."""


class ConvergenceError(RuntimeError):
    """An iterative solver failed to converge.

    Carries the final residual so callers can report how far off it was.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class EvaluationError(RuntimeError):
    """Progress evaluation of an episode failed; the trace is unusable."""


class DegenerateKeyError(ValueError):
    """A retrieval key could not be normalized (zero-norm projection)."""


class SnapshotFormatError(ValueError):
    """A memory snapshot file is malformed. ``line`` is 1-based."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SnapshotCompatibilityError(ValueError):
    """A snapshot's declared dimensions do not match the current config."""


class SamplingDivergenceError(RuntimeError):
    """The sampler produced a non-finite iterate. ``step`` is the grid index."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
