"""Exception types shared across the package."""


class InputError(ValueError):
    """Bad user input: malformed file, invalid configuration, unusable data."""


class ParseError(InputError):
    """A data file could not be parsed; the message names the row."""


class PositivityError(InputError):
    """Some arm has no subject observed at every visit."""


class SingularDesignError(InputError):
    """The weighted least-squares normal matrix is singular."""


class NotPositiveDefiniteError(InputError):
    """A matrix that must be positive definite is not (within tolerance)."""


class ConfigError(InputError):
    """Invalid simulation or population configuration."""
