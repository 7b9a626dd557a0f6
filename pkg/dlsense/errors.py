# dlsense/errors.py


class DLSenseError(Exception):
    """Base class for every error raised by dlsense."""


class ValidationError(DLSenseError, ValueError):
    """A precondition on an input, spec or file was violated (CLI exit code 2)."""


class DivergenceError(DLSenseError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f'non-finite loss {loss!r} at epoch {epoch}, batch {batch}')
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class StageError(DLSenseError):
    """Failure inside one stage of run_experiment; carries the stage tag."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f'[{stage}] {type(cause).__name__}: {cause}')
        self.stage = stage
        self.cause = cause
