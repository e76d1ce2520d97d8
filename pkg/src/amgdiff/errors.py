"""Exception hierarchy. Each family maps to a CLI exit code."""


class AmgError(Exception):
    exit_code = 1


class ConfigError(AmgError, ValueError):
    """Invalid configuration, schema violation or unsupported format version."""

    exit_code = 2


class DataFormatError(AmgError, ValueError):
    """Malformed input data: corrupted container, bad IMS file, size mismatch."""

    exit_code = 3


class NumericFault(AmgError, ArithmeticError):
    """NaN/Inf produced during computation."""

    exit_code = 4


class MissingInputError(AmgError, FileNotFoundError):
    exit_code = 5


class ShapeError(AmgError, ValueError):
    exit_code = 3


class ContractError(AmgError, ValueError):
    """A precondition of an operation was violated by the caller."""

    exit_code = 2


class DegenerateError(AmgError, ValueError):
    """Input is well-formed but mathematically degenerate (zero power, zero variance...)."""

    exit_code = 4


class EmptyInputError(DataFormatError):
    pass


class UnsupportedVersionError(ConfigError):
    pass
