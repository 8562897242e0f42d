"""Exception types shared across the package."""


class TwinsError(Exception):
    pass


class ConfigError(TwinsError, ValueError):
    """Invalid configuration value or combination of values."""


class FormatError(TwinsError):
    """On-disk dataset or checkpoint file is malformed."""

    def __init__(self, message, path=None):
        self.path = path
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class ContractError(TwinsError, ValueError):
    """Arguments violate a shape or consistency contract."""


class DataError(TwinsError, ValueError):
    """Input data outside the domain an operation accepts."""


class NumericalError(TwinsError, FloatingPointError):
    """Non-finite values encountered during a forward or loss computation."""


class EmptyMaskWarning(UserWarning):
    """A reduction was requested over an empty validity mask."""
