"""Exception types for py-fedpoison.

All domain errors derive from ``ValueError`` so callers that only care about
"bad input" can catch a single type.
"""

from typing import Optional


class DatasetError(ValueError):
    """Raised when a dataset file or table violates the expected schema."""

    def __init__(self, message: str, line: Optional[int] = None) -> None:
        """Initialize the error.

        Args:
            message: Human readable description
            line: 1-based line number in the source file, if known
        """
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StratificationError(DatasetError):
    """Raised when a dataset cannot be split with both labels represented."""


class MissingClassError(ValueError):
    """Raised when an operation needs both labels but one is absent."""


class DegenerateColumnError(ValueError):
    """Raised when a feature column has max == min and cannot be normalized."""


class ShapeMismatchError(ValueError):
    """Raised when parameter, gradient or batch shapes do not line up."""


class AttackError(ValueError):
    """Raised when a poisoning attack cannot be applied to a client shard."""


class LabelColumnError(DatasetError):
    """Raised when the requested label column does not exist in the file."""
