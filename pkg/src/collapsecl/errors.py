"""
Exception hierarchy for collapsecl.

Every error is a ValueError so callers that only care about "bad input" can
catch one type.
"""

from __future__ import annotations

from typing import Optional


class CollapseError(ValueError):
    """Root of all collapsecl errors."""


class DimensionError(CollapseError):
    """Prototype count does not fit the embedding dimension (K > d + 1)."""


class DomainError(CollapseError):
    """Argument outside its mathematical domain (e.g. K < 2)."""


class MissingClassError(CollapseError, KeyError):
    """A class label has no prototype vertex."""

    def __str__(self) -> str:
        # KeyError quotes its message; keep the ValueError rendering.
        return str(self.args[0]) if self.args else ""


class DegenerateAnchorError(CollapseError):
    """An anchor has no positive in the batch."""


class EmptyBatchError(CollapseError):
    """A batch has no anchors or too few views."""


class ShapeError(CollapseError):
    """Array shapes do not line up."""


class EmptyPrototypeError(CollapseError):
    """A loss needs at least one prototype and got none."""


class CacheError(CollapseError):
    """Forward cache is stale or belongs to another parameter set."""


class ProtocolError(CollapseError):
    """A training or evaluation stage ran out of order."""


class IncompleteMatrixError(CollapseError):
    """Accuracy matrix is missing entries a metric needs."""


class UndefinedMetricError(CollapseError):
    """Metric is undefined for this input (e.g. forgetting with T < 2)."""


class DegenerateClassError(CollapseError):
    """A class has too few samples for a statistic."""


class DatasetError(CollapseError):
    """Dataset file is malformed or violates stream invariants."""


class UsageError(CollapseError):
    """Command-line usage error."""


class ConfigError(CollapseError):
    """Invalid configuration, optionally located at a field and line."""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        super().__init__(message)
        self.message = message
        self.field = field
        self.line = line

    def __str__(self) -> str:
        if self.line is not None:
            return f"line {self.line}: {self.message}"
        return self.message
