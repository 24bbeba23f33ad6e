"""Exception hierarchy.

Every error raised by the library derives from :class:`PanelSynthError`. The
CLI maps the three intermediate classes onto its exit codes.
"""


class PanelSynthError(Exception):
    """Base class for all library errors."""


class ConfigError(PanelSynthError):
    """Invalid configuration or schema declaration."""


class DataError(PanelSynthError):
    """Input data violates a structural contract."""


class NumericError(PanelSynthError):
    """A numerical routine failed or produced an unusable result."""


class SchemaError(ConfigError):
    pass


class ParseError(DataError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class IntegrityError(DataError):
    pass


class AlignmentError(DataError):
    pass


class BaselineError(DataError):
    pass


class LayoutError(DataError):
    pass


class ConditioningError(DataError):
    pass


class LagError(DataError):
    pass


class FoldError(DataError):
    pass


class InferenceError(DataError):
    """Too few clusters for cluster-robust inference."""


class FitError(NumericError):
    pass


class DivergenceError(NumericError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class SeparationError(NumericError):
    pass


class CollinearityError(NumericError):
    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class SingularMatrixError(NumericError):
    pass


class StabilityUndefinedError(NumericError):
    pass


class MetricError(NumericError):
    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = failures or {}


class StageError(PanelSynthError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
