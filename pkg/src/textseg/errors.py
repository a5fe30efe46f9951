"""Exception hierarchy shared by every module."""


class TextsegError(Exception):
    """Base class for all errors raised by this package."""


class StructuralError(TextsegError, ValueError):
    pass


class ShapeError(TextsegError, ValueError):
    pass


class BoundsError(TextsegError, IndexError):
    pass


class MappingError(TextsegError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message by default
        return str(self.args[0]) if self.args else ""


class VocabularyError(TextsegError, ValueError):
    pass


class GroupSizeError(TextsegError, ValueError):
    pass


class StateError(TextsegError, RuntimeError):
    pass


class NumericalError(TextsegError, FloatingPointError):
    pass


class CompletenessError(TextsegError, ValueError):
    pass


class InferenceError(TextsegError, RuntimeError):
    """Every tile of an inference job failed."""
