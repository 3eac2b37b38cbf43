"""Exception hierarchy shared by every module."""


class RlhfLabError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(RlhfLabError, ValueError):
    """A precondition on an operation's inputs was not met."""


class SizeError(RlhfLabError, ValueError):
    """An enumeration or sampling request exceeds what is available."""


class TrainingError(RlhfLabError, RuntimeError):
    """Optimization produced a non-finite loss or gradient.

    Parameters
    ----------
    message : str
        Human readable description.
    epoch : int, optional
        Iteration at which the failure was detected.
    """

    def __init__(self, message: str, epoch: int | None = None) -> None:
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)
        self.epoch = epoch
