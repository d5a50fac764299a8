"""Exception hierarchy; each family maps onto one CLI exit code."""


class VaggError(Exception):
    exit_code = 1


class ConfigError(VaggError, ValueError):
    exit_code = 2


class FormatError(VaggError, ValueError):
    """Malformed file header or framing."""

    exit_code = 3


class SchemaError(VaggError, ValueError):
    """Dimensions disagree with the declared header or with each other."""

    exit_code = 3


class DataError(VaggError, ValueError):
    """Well-formed input carrying invalid values (non-finite, out of range, missing)."""

    exit_code = 3


class NumericError(VaggError, ArithmeticError):
    exit_code = 4

    def __init__(self, stage, detail=""):
        self.stage = stage
        msg = f"non-finite values at stage '{stage}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class StateError(VaggError, RuntimeError):
    exit_code = 1
