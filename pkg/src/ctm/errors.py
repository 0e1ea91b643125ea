"""Exception hierarchy; the CLI maps each family to an exit code."""


class CTMError(Exception):
    exit_code = 3


class ConfigError(CTMError):
    exit_code = 1


class DataError(CTMError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class LengthError(DataError):
    """An input does not fit the configured maximum sequence length."""


class ContractError(CTMError):
    """A function was called in violation of its preconditions."""


class DimensionError(ContractError):
    pass


class InvariantError(CTMError):
    """An internal invariant was violated (e.g. gradient reached a frozen parameter)."""
