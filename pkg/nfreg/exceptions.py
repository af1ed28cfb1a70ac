"""Exception types raised across nfreg."""


class NfregError(Exception):
    """Base for all nfreg errors."""

    pass


class InvalidInputError(NfregError, ValueError):
    """An argument violates an operation's precondition."""

    pass


class StateError(NfregError, RuntimeError):
    """An object is used before it is ready, e.g. a field queried before binding."""

    pass


class NumericalDegeneracyError(NfregError, ArithmeticError):
    """A closed-form solve has no unique answer for the given data."""

    pass


class UnsupportedPrimitiveError(NfregError, TypeError):
    """An expression uses an operation the autodiff tape cannot differentiate."""

    pass


class ConfigError(NfregError):
    """Configuration does not pass schema validation."""

    def __init__(self, msg, key=None):
        super(ConfigError, self).__init__(msg)
        self.key = key


class ArchiveFormatError(NfregError):
    """Weight archive is truncated or inconsistent with its manifest."""

    pass


class ArchiveVersionError(NfregError):
    """Weight archive was written with an unsupported format version."""

    pass
