class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ContractError(ValueError):
    """A precondition of an operation was violated by the caller."""


class FormatError(ValueError):
    """A file on disk does not match its binary layout."""


class TrainingDiverged(FloatingPointError):
    """Loss became NaN/Inf; the last good checkpoint is left in place."""
