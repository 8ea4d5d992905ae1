"""Exception types shared across the package."""


class CstError(Exception):
    """Base class for all package errors."""


class ShapeError(CstError, ValueError):
    """Operands have incompatible shapes; the message carries both shapes."""


class NumericError(CstError, ArithmeticError):
    """An op produced a non-finite value, or was fed one."""


class GraphError(CstError, RuntimeError):
    """Autodiff graph misuse (non-scalar loss, repeated backward, ...)."""


class DeterminismError(CstError, RuntimeError):
    """A function returned different values on identical probe calls."""


class ConfigError(CstError, ValueError):
    """Invalid or inconsistent configuration. CLI exit code 2."""


class DataError(CstError, ValueError):
    """Unreadable, missing or geometrically inconsistent data. CLI exit code 3."""
