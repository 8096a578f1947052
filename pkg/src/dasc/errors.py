"""Exception types shared across the package; the CLI maps them to exit codes."""


class DascError(Exception):
    exit_code = 1


class ConfigError(DascError, ValueError):
    exit_code = 2


class DataError(DascError, ValueError):
    exit_code = 3


class DivergenceError(DascError, ArithmeticError):
    exit_code = 4


class CheckpointError(DataError):
    """Base for checkpoint loading failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes, truncated payload or unparsable header."""


class CheckpointVersionError(CheckpointError):
    pass


class SchemaMismatchError(CheckpointError):
    pass


class MethodMismatchError(CheckpointError):
    pass


class UnsupportedCompositionError(ConfigError):
    """CTRL codes cannot express more than one active attribute per aspect."""
