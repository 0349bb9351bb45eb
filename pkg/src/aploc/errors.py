"""Exception hierarchy shared by all aploc modules."""


class AplocError(Exception):
    """Base class for every error raised by aploc."""


class InvalidData(AplocError, ValueError):
    pass


class NumericalError(AplocError, ArithmeticError):
    pass


class SingularPencil(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass


class InvalidGeometry(AplocError, ValueError):
    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (point {index})")
        self.index = index


class DegenerateGrid(AplocError, ValueError):
    pass


class DegenerateWaveforms(AplocError, ValueError):
    pass


class SilentSources(AplocError):
    """Raised when the data or localizer carries no detectable source energy."""


class InsufficientGrid(AplocError, ValueError):
    pass


class FormatError(AplocError, ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset
