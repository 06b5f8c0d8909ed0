"""Exception types shared across the package."""


class NDSSMError(Exception):
    """Base class for all package errors."""


class ConfigError(NDSSMError, ValueError):
    """Invalid or unsupported configuration."""


class DomainError(NDSSMError, ValueError):
    """Arguments outside the domain of an operation (bad shapes, sizes, signs)."""


class NumericalError(NDSSMError, ArithmeticError):
    """Non-finite values or singular arithmetic encountered."""


class CapacityError(NDSSMError, MemoryError):
    """A size guard was violated."""


class UsageError(NDSSMError, RuntimeError):
    """Operations called out of order (e.g. backward without forward)."""


class ContainerError(NDSSMError, ValueError):
    """Malformed tensor container."""
