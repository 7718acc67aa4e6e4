"""Exception types shared across the package."""

from __future__ import annotations


class DatasetFormatError(ValueError):
    """Raised when a dataset or checkpoint file is malformed.

    ``offset`` is the byte position in the file at which the problem was
    detected (0 for a bad magic string).
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class PrototypeStateError(RuntimeError):
    """Raised when a loss is evaluated against an uninitialized class prototype."""


class TrainingError(RuntimeError):
    """Raised when training diverges; the message names the offending step."""
