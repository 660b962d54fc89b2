"""Exception types raised across the package."""


class QuadnerfError(Exception):
    """Base class of every error raised on purpose by this package."""


class InvalidArgument(QuadnerfError, ValueError):
    pass


class TrainingFault(QuadnerfError, RuntimeError):
    """A loss term became non-finite during optimization."""

    def __init__(self, term, value=None):
        self.term = term
        self.value = value
        super().__init__(f"non-finite loss term '{term}' (value={value})")


class LoadError(QuadnerfError, OSError):
    pass


class GenerationError(QuadnerfError, RuntimeError):
    pass


class BehindCamera(QuadnerfError, ValueError):
    pass


class UndefinedMetric(QuadnerfError, ValueError):
    pass


class CheckpointError(QuadnerfError, RuntimeError):
    pass
