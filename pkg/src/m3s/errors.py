"""Exception hierarchy shared by every subsystem.

The CLI maps these onto exit codes: usage/config problems exit 1, data
ingestion problems exit 2, numeric failures exit 3.
"""


class M3SError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(M3SError):
    """Operands have incompatible or invalid shapes."""


class ContractError(M3SError):
    """A caller violated an operation's precondition."""


class NumericError(M3SError):
    """A computation produced or received non-finite values."""


class ConfigError(M3SError):
    """An experiment configuration is invalid or inconsistent."""


class DataError(M3SError):
    """A dataset on disk is malformed or violates its invariants."""
