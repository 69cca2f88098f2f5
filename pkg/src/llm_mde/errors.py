"""Exception types raised across the package."""


class LlmMdeError(Exception):
    """Base class for all package errors."""


class IngestError(LlmMdeError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class RangeError(LlmMdeError, IndexError):
    pass


class ShapeError(LlmMdeError, ValueError):
    pass


class SplitError(LlmMdeError):
    pass


class WeightLoadError(LlmMdeError):
    pass


class VocabError(LlmMdeError, IndexError):
    pass


class NumericError(LlmMdeError, ArithmeticError):
    pass


class ConfigError(LlmMdeError, ValueError):
    pass


class StateError(LlmMdeError, RuntimeError):
    pass


class LossError(LlmMdeError, ValueError):
    pass


class TrainError(LlmMdeError, RuntimeError):
    def __init__(self, message, step=None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class MetricsError(LlmMdeError, ValueError):
    pass


class ReportError(LlmMdeError):
    pass


class IoError(LlmMdeError, OSError):
    pass
