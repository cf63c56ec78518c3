"""Exception types shared across the package."""


class ConvRagError(Exception):
    """Base class; the CLI turns these into a machine-parseable error line."""

    code = "error"


class DimensionError(ConvRagError, ValueError):
    code = "dimension"


class NumericError(ConvRagError, ArithmeticError):
    code = "numeric"


class MaskError(ConvRagError, ValueError):
    code = "mask"


class TokenIndexError(ConvRagError, IndexError):
    code = "index"


class TruncationError(ConvRagError, ValueError):
    code = "truncation"


class ContextOverflowError(ConvRagError, ValueError):
    code = "context_overflow"


class ParseError(ConvRagError, ValueError):
    code = "parse"

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        super().__init__(message)


class IntegrityError(ConvRagError, ValueError):
    code = "integrity"


class ConfigError(ConvRagError, ValueError):
    code = "config"


class UndefinedMetricError(ConvRagError, ValueError):
    code = "undefined_metric"


class DivergenceError(ConvRagError, ArithmeticError):
    code = "divergence"

    def __init__(self, message, component=None, step=None):
        self.component = component
        self.step = step
        super().__init__(message)
