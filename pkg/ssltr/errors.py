class SsltrError(Exception):
    """Base class for all errors raised by ssltr."""


class DimensionMismatch(SsltrError, ValueError):
    """Two arrays that must share a feature dimension do not."""


class EmptyInput(SsltrError, ValueError):
    """An operation that aggregates over its input received nothing."""


class TrainingDiverged(SsltrError):
    """A training loss became NaN or infinite."""

    def __init__(self, stage: str, iteration: int, loss: float):
        super().__init__(
            f"{stage}: loss became {loss!r} at iteration {iteration}; aborting"
        )
        self.stage = stage
        self.iteration = iteration
        self.loss = loss


__all__ = [
    "SsltrError",
    "DimensionMismatch",
    "EmptyInput",
    "TrainingDiverged",
]
