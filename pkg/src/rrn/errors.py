"""Exception hierarchy shared across the package."""


class RRNError(Exception):
    """Base class for all package errors."""


class InvalidInputError(RRNError, ValueError):
    pass


class InvalidPairError(RRNError, ValueError):
    pass


class ConfigurationError(RRNError, ValueError):
    pass


class DatasetError(RRNError, KeyError):
    """Raised when a subject lacks a landmark or a dataset is malformed."""

    def __str__(self):
        # KeyError quotes its message; keep it readable.
        return str(self.args[0]) if self.args else ""


class ShapeError(RRNError, ValueError):
    pass


class StateError(RRNError, RuntimeError):
    pass


class TrainingError(RRNError, RuntimeError):
    pass


class InvalidWeightsError(RRNError, ValueError):
    pass


class LoadError(DatasetError):
    pass
