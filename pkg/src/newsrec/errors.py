"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: usage/config problems exit 1,
data problems exit 2, numeric failures exit 3.
"""


class NewsrecError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(NewsrecError):
    """A caller violated a documented precondition."""


class ShapeError(ContractError):
    """Array shapes or dimensions disagree."""


class DomainError(ContractError):
    """A value lies outside an operation's mathematical domain."""


class DegenerateMaskError(ContractError):
    """A softmax/attention row had every position masked out."""


class DegenerateVectorError(ContractError):
    """A vector with (near-)zero norm where a direction is required."""


class ConfigError(NewsrecError):
    """Invalid or inconsistent configuration."""


class DataError(NewsrecError):
    """Input data is structurally valid but semantically unusable."""


class ParseError(DataError):
    """Malformed input line; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class DuplicateIdError(DataError):
    """The same identifier appeared more than once in a table."""


class CheckpointError(NewsrecError):
    """A checkpoint file failed validation on load."""


class NumericError(NewsrecError):
    """A non-finite value (NaN/Inf) appeared where one must not."""
