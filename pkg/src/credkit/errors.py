"""Exception hierarchy shared across the package.

Three error classes matter to callers (and to the CLI exit codes):
configuration problems, data problems, and numeric problems. Every
exception raised on purpose by this package derives from CredkitError.
"""

from __future__ import annotations


class CredkitError(Exception):
    """Base class for all errors raised by credkit."""


class ParameterError(CredkitError):
    """Distribution or prior parameters outside their valid domain."""


class SupportError(CredkitError):
    """An observation value outside the support of its distribution."""


class DivergenceError(CredkitError):
    """A requested expectation does not exist (MGF or moment diverges)."""


class DegenerateWeightsError(CredkitError):
    """All importance weights underflowed the log floor."""


class SchemaError(CredkitError):
    """A data file violates the documented schema."""


class SequencingError(CredkitError):
    """An observation appended out of period order."""


class ConfigError(CredkitError):
    """A run configuration is invalid or incomplete."""


class NumericError(CredkitError):
    """A numeric computation cannot proceed (singular system, MST=0, ...)."""


# CLI exit code classes. 0 is success; argparse itself exits 2 on bad flags,
# so configuration problems share that code.
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_EXIT_CODES: dict[type, int] = {
    ConfigError: EXIT_CONFIG,
    ParameterError: EXIT_CONFIG,
    SchemaError: EXIT_DATA,
    SupportError: EXIT_DATA,
    SequencingError: EXIT_DATA,
    FileNotFoundError: EXIT_DATA,
    DivergenceError: EXIT_NUMERIC,
    DegenerateWeightsError: EXIT_NUMERIC,
    NumericError: EXIT_NUMERIC,
}


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code of its error class."""
    for klass, code in _EXIT_CODES.items():
        if isinstance(exc, klass):
            return code
    return 1
