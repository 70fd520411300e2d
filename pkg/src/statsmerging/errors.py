"""Exception hierarchy shared by every module.

The CLI maps any :class:`StatsMergingError` to exit code 1 and prints its
``category``.
"""

from __future__ import annotations


class StatsMergingError(Exception):
    category = "error"


class ShapeError(StatsMergingError, ValueError):
    category = "shape"


class ParameterError(StatsMergingError, ValueError):
    category = "parameter"


class CompatibilityError(StatsMergingError, ValueError):
    category = "compatibility"


class FormatError(StatsMergingError, ValueError):
    """Malformed container file. ``offset`` is the byte position of the fault."""

    category = "format"

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class StageError(StatsMergingError):
    """Wraps a failure inside a pipeline stage, keeping the original category."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.category = getattr(cause, "category", "error")
