"""Exception types shared across the toolkit.

The CLI maps these onto process exit codes, so raising the right type
matters more than the message wording:

    UsageError      -> 2   bad command line
    ConfigError     -> 3   bad or inconsistent configuration
    DataError       -> 4   unreadable / malformed / mismatched data
    NumericalError  -> 5   non-finite values or other runtime failures
"""


class UsageError(Exception):
    """Command line arguments could not be interpreted."""


class ConfigError(Exception):
    """A configuration file or override is invalid or inconsistent."""


class DataError(Exception):
    """Input data violates a documented contract (shape, codes, layout)."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values or diverged."""
