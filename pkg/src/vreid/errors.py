class ReidError(Exception):
    """Base class for toolkit errors."""

    exit_code = 1


class ConfigError(ReidError, ValueError):
    exit_code = 2


class DataError(ReidError, ValueError):
    exit_code = 3


class NumericError(ReidError, ArithmeticError):
    exit_code = 4
