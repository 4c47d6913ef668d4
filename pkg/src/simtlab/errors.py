"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4. Everything else is an ordinary bug.
"""


class SimtError(Exception):
    """Base class for all package errors."""


class ShapeError(SimtError):
    """Tensor or matrix dimensions are inconsistent."""


class ContractError(SimtError):
    """An operation was called in a way that violates its contract."""


class ConfigError(SimtError):
    """Invalid experiment or model configuration."""


class DataError(SimtError):
    """Corpus, vocabulary, or alignment problems in input data."""


class NumericError(SimtError):
    """NaN/Inf contamination or optimizer divergence."""


class FormatError(DataError):
    """A binary or text artifact does not match its declared layout."""
