"""Exception types shared across the package."""


class GpdError(Exception):
    """Base class for all errors raised by gpdnet."""


class DimensionError(GpdError, ValueError):
    pass


class ContractError(GpdError, ValueError):
    """A documented precondition was violated by the caller."""


class GeometryError(GpdError, ValueError):
    pass


class ConfigError(GpdError, ValueError):
    pass


class NumericError(GpdError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class VersionError(GpdError):
    pass


class DataIOError(GpdError, OSError):
    """A file could not be read, parsed or written."""
