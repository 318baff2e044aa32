"""Exception taxonomy shared across the package.

Each class maps to a distinct CLI exit code so shell pipelines can tell
configuration mistakes from bad data, network trouble, or a diverged run.
"""


class CausalMarketError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(CausalMarketError):
    """Invalid configuration, manifest, or argument combination."""

    exit_code = 2


class DataError(CausalMarketError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class NetworkError(CausalMarketError):
    """Chat endpoint unreachable, auth failure, or offline cache miss."""

    exit_code = 4


class DivergenceError(CausalMarketError):
    """Numeric divergence during training (NaN loss or gradient)."""

    exit_code = 5


class ParseError(CausalMarketError):
    """LLM response did not contain the five labeled scores."""

    def __init__(self, message: str, raw_response: str = ""):
        super().__init__(message)
        self.raw_response = raw_response
