"""Exception hierarchy shared across the package."""


class RefsegError(Exception):
    """Base class for every error raised by refseg."""


class DimensionError(RefsegError, ValueError):
    """Shapes or extents do not agree with what an operation requires."""


class DomainError(RefsegError, ValueError):
    """Input values fall outside the domain of an operation."""


class NonFiniteError(RefsegError, FloatingPointError):
    """An operation produced NaN or Inf."""


class ConfigError(RefsegError, ValueError):
    pass


class FormatError(RefsegError, ValueError):
    """A binary file on disk is malformed."""


class StateError(RefsegError, RuntimeError):
    pass


class GenerationError(RefsegError, RuntimeError):
    """Synthetic scene generation could not satisfy its constraints."""


class DivergenceError(RefsegError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int, batch_index: int, item_indices=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index
        self.item_indices = item_indices
