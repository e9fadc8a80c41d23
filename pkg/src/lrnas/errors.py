"""Exception types shared by every module."""


class LrnasError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(LrnasError, ValueError):
    """Tensor shapes or divisibility constraints do not line up."""


class ContractError(LrnasError, ValueError):
    """A documented precondition of an operation was violated."""


class NumericError(LrnasError, ArithmeticError):
    """Non-finite values reached an operation that cannot handle them."""


class TrainingError(LrnasError, RuntimeError):
    """A training loop produced a non-finite loss."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class LatencyLookupError(LrnasError, KeyError):
    """A layer signature is absent from a latency table."""

    def __init__(self, signature):
        super().__init__(signature)
        self.signature = signature

    def __str__(self):
        return f"no latency entry for signature {self.signature!r}"


class ArtifactError(LrnasError, ValueError):
    """An input artifact on disk is missing or malformed."""

    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = path
