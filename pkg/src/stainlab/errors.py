"""Exception hierarchy shared by every stainlab module."""


class StainlabError(Exception):
    pass


class DimensionError(StainlabError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class DegenerateInputError(StainlabError, ValueError):
    """Input is mathematically degenerate (zero norm, zero variance, singular)."""


class DegenerateClassError(DegenerateInputError):
    """A prototype class received zero total probability mass."""

    def __init__(self, message, classes=()):
        super().__init__(message)
        self.classes = tuple(classes)


class EvaluationError(StainlabError, ArithmeticError):
    """A function evaluation produced a non-finite value."""


class AlignmentError(StainlabError, ValueError):
    pass


class InputError(StainlabError, ValueError):
    """Values out of the admissible range (non-finite features, probabilities outside (0, 1))."""


class ConfigError(StainlabError, ValueError):
    pass


class FormatError(StainlabError, ValueError):
    """Binary fixture or checkpoint has a corrupt or unexpected header."""


class StainLookupError(StainlabError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class CacheMismatchError(StainlabError, ValueError):
    pass


class ImageReadError(StainlabError, OSError):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason
