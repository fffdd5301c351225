"""Exception hierarchy shared by every exnet module."""

from __future__ import annotations


class ExnetError(Exception):
    """Base class for all errors raised by this package."""


class GraphError(ExnetError, ValueError):
    """Malformed graph input (cycles, several roots, bad child slots)."""


class NotAChildError(GraphError):
    """A sibling query named a vertex that is not a child of the parent."""


class DimensionError(ExnetError, ValueError):
    """A vector or parameter block does not have the expected length."""


class NonFiniteGradientError(ExnetError, FloatingPointError):
    """A gradient (or loss) contained NaN or inf; the update was rejected."""


class ConfigError(ExnetError, ValueError):
    """Run configuration failed parsing or cross-validation."""


class MissingCacheError(ExnetError, KeyError):
    """An extraction cache or table lacks an entry an operation needs."""


class ConsistencyError(ExnetError, RuntimeError):
    """Cached XProp-A extractions disagree with a fresh up pass."""
