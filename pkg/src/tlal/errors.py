"""Exception hierarchy shared across the pipeline."""


class TlalError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(TlalError, ValueError):
    pass


class IngestionError(TlalError):
    pass


class StructuralError(TlalError):
    pass


class SamplingError(TlalError):
    pass


class StratificationError(TlalError):
    pass


class ConsistencyError(TlalError):
    pass


class DomainError(TlalError, ValueError):
    pass


class ArityError(TlalError, ValueError):
    pass


class NumericalError(TlalError, ArithmeticError):
    pass


class DivergenceError(NumericalError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"non-finite training loss at epoch {epoch}")


class UndefinedMetricError(TlalError, ValueError):
    pass


class StatisticsError(TlalError, ValueError):
    pass


class ResourceError(TlalError):
    pass


class ShapeError(TlalError, ValueError):
    pass


class ReportError(TlalError):
    pass


class StageError(TlalError):
    """A pipeline stage failed; carries the stage name and replay hint."""

    def __init__(self, stage: str, cause: BaseException, hint: str = ""):
        self.stage = stage
        self.cause = cause
        msg = f"stage '{stage}' failed: {cause}"
        if hint:
            msg += f"\n{hint}"
        super().__init__(msg)
