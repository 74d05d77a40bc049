"""Exception types shared across the package; the CLI maps them to exit codes."""


class ConfigError(ValueError):
    """Invalid configuration or argument (exit code 1)."""


class DataError(ValueError):
    """Missing, undecodable or inconsistent input data (exit code 2)."""


class NumericError(ArithmeticError):
    """Non-finite values or a failed numerical factorization (exit code 3)."""


class ConsistencyError(ValueError):
    """A mask plan does not match the example it is applied to."""
