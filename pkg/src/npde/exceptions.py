"""Package-wide error type.

Every contract violation raised by this package derives from NpdeError so
callers (and the CLI) can distinguish domain failures from programming bugs.
"""

from __future__ import annotations

__all__ = ["NpdeError"]


class NpdeError(Exception):
    """Base class for all errors raised by the npde package."""
