class ProtoFSSLError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(ProtoFSSLError, ValueError):
    pass


class StateError(ProtoFSSLError, RuntimeError):
    pass


class ConfigurationError(ProtoFSSLError, ValueError):
    pass


class EmptySupportError(ProtoFSSLError, ValueError):
    pass


class SizingError(ProtoFSSLError, ValueError):
    pass


class DatasetFormatError(ProtoFSSLError, ValueError):
    pass


class NonFiniteError(ProtoFSSLError, FloatingPointError):
    """A loss or parameter became NaN/Inf during training."""

    def __init__(self, message, round=None):
        super().__init__(message)
        self.round = round
