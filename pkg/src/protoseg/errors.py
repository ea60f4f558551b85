"""Shared exception types."""


class ContractViolationError(ValueError):
    """An operation was called with arguments that break its contract."""


class EmptyClassError(RuntimeError):
    """A prototype was requested for a class with no pixels available."""


class DatasetError(RuntimeError):
    """A dataset could not be generated, loaded, or sampled from."""


class UnderPopulatedClassError(DatasetError):
    """A class does not have enough eligible images for the requested episode."""


class TrainingError(RuntimeError):
    """Training aborted (e.g. non-finite loss)."""
