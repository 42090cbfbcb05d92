"""Exception hierarchy shared across the package."""


class GluAttnError(Exception):
    """Base class for every error raised by gluattn."""


class ShapeError(GluAttnError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DTypeError(GluAttnError, TypeError):
    pass


class ConfigError(GluAttnError, ValueError):
    """An architecture, training or experiment configuration is invalid."""


class GradientError(GluAttnError, RuntimeError):
    """Misuse of the tape: non-scalar loss, double backward, stale gradients."""


class NumericError(GluAttnError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class DivergenceError(NumericError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step}: loss={loss!r}")
        self.step = step
        self.loss = loss


class CheckpointError(GluAttnError, IOError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
