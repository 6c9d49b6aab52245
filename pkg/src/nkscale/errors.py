"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array extents do not agree."""


class NumericDomainError(ArithmeticError):
    """A value fell outside the domain of a kernel transform."""


class SingularityError(ArithmeticError):
    """A matrix that must be invertible is singular to working precision."""


class NotSPDError(ArithmeticError):
    """An operator expected to be symmetric positive definite is not."""


class DivergenceError(ArithmeticError):
    """An iterative solver produced non-finite values."""


class CorruptBlockError(IOError):
    """A stored block failed its checksum or header validation."""


class IncompleteKernelError(RuntimeError):
    """A kernel manifest still has pending blocks."""


class FrameError(IOError):
    """A wire frame could not be decoded."""


class WorkerFailure(RuntimeError):
    """All workers able to serve a request have failed."""
