"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataFormatError -> 3,
NumericalError (including IntegrationError) -> 4.
"""


class NDP4NDError(Exception):
    """Base class for package errors."""


class ParameterError(NDP4NDError, ValueError):
    """Invalid argument or specification value."""


class ConfigError(NDP4NDError):
    """Invalid or inconsistent experiment configuration."""


class DataFormatError(NDP4NDError):
    """Malformed dataset, edge list, or checkpoint content."""


class NumericalError(NDP4NDError):
    """Non-finite loss or other numerical breakdown during computation."""


class IntegrationError(NumericalError):
    """ODE solve failed; carries the last time reached before failure."""

    def __init__(self, message: str, last_time: float):
        super().__init__(f"{message} (last good time t={last_time})")
        self.last_time = last_time
