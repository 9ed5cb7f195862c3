class AlgcdError(Exception):
    pass


class DimensionError(AlgcdError, ValueError):
    pass


class NumericError(AlgcdError, FloatingPointError):
    pass


class DegenerateVectorError(NumericError):
    def __init__(self, msg, row=None):
        super().__init__(msg)
        self.row = row


class GraphError(AlgcdError, RuntimeError):
    pass


class ConfigError(AlgcdError, ValueError):
    pass


class FormatError(AlgcdError, ValueError):
    pass


class ChecksumError(FormatError):
    pass


class ProtocolViolation(AlgcdError, ValueError):
    """Labeled data referencing a class outside the known set."""


class DivergenceError(NumericError):
    pass
