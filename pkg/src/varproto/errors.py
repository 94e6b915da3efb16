"""Exception hierarchy shared by every module and the CLI exit-code mapping."""


class VarProtoError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class UsageError(VarProtoError, ValueError):
    """Caller passed arguments that violate an operation's preconditions."""

    exit_code = 2


class ConfigurationError(VarProtoError, ValueError):
    """A run configuration cannot be satisfied by the data at hand."""

    exit_code = 2


class FormatError(VarProtoError, ValueError):
    """An input file could not be parsed or fails its schema."""

    exit_code = 3


class IncompatibleVersionError(FormatError):
    """A persisted file carries an unsupported format version."""


class RegistryLookupError(VarProtoError, KeyError):
    """Requested task id is not present in a registry."""

    exit_code = 3


class NumericError(VarProtoError, ArithmeticError):
    """A computation produced a non-finite value."""

    exit_code = 4
