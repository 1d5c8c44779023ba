"""Exception hierarchy shared by every module of the package."""


class AasnError(Exception):
    """Base class for all package errors."""


class DimensionError(AasnError, ValueError):
    """An operand has the wrong shape along some axis."""


class ContractError(AasnError, RuntimeError):
    """A call violated an operation's precondition."""


class GeometryError(AasnError, ValueError):
    pass


class SingularSystemError(GeometryError):
    pass


class SchemaError(AasnError, ValueError):
    """A landmark or annotation file does not follow the published schema."""


class MetricError(AasnError, ValueError):
    pass


class ConfigError(AasnError, ValueError):
    pass


class CheckpointError(AasnError, IOError):
    """A checkpoint could not be read back (bad magic, version, truncation...)."""


class DivergenceError(AasnError, RuntimeError):
    """Training produced a non-finite loss."""
