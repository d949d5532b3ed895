"""Exception hierarchy shared by every nsfx module."""


class NsfxError(Exception):
    """Base class for all library errors."""


class InvalidInputError(NsfxError, ValueError):
    pass


class NonFiniteError(NsfxError, FloatingPointError):
    pass


class ShapeError(NsfxError, ValueError):
    pass


class DegenerateVectorError(NsfxError, ValueError):
    pass


class ConsistencyError(NsfxError, ValueError):
    """Backward called with a cache/record that does not belong to the inputs."""


class LabelError(NsfxError, IndexError):
    pass


class FormatError(NsfxError, ValueError):
    """Malformed IDX or params file. ``field`` names the offending header field."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DivergedError(NsfxError, FloatingPointError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ProbeError(NsfxError, FloatingPointError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ConfigError(NsfxError, ValueError):
    pass
