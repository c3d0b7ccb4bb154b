"""Exception types shared across the package."""


class SinklabError(Exception):
    pass


class DimensionError(SinklabError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(SinklabError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class NumericError(SinklabError, FloatingPointError):
    """A non-finite value appeared in a forward computation."""


class InputError(SinklabError, ValueError):
    pass


class ConfigError(SinklabError, ValueError):
    pass


class StatisticsError(SinklabError, ValueError):
    """Not enough samples for the requested statistic."""


class DomainError(SinklabError, ValueError):
    """Argument outside the domain where a metric is defined."""


class FormatError(SinklabError, ValueError):
    """A file does not follow the expected binary layout."""


class UnsupportedVersionError(FormatError):
    pass


class TrainingAborted(SinklabError, RuntimeError):
    pass
