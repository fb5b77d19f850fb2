class KdmError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(KdmError, ValueError):
    pass


class ConfigError(KdmError, ValueError):
    pass


class OptimizerError(KdmError, FloatingPointError):
    pass


class ConditioningError(KdmError, ArithmeticError):
    pass


class TrainingError(KdmError, FloatingPointError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration


class IntegrationError(KdmError, FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class UnsupportedOperation(KdmError, TypeError):
    pass


class MissingInputError(KdmError, FileNotFoundError):
    pass


# container format failures
class FormatError(KdmError, ValueError):
    pass


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class NonFinitePayloadError(FormatError):
    pass
