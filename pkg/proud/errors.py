# proud/errors.py
"""
Exception hierarchy for the laboratory.

Every error carries a human-readable ``detail`` the way the API layer used to
hand one to ``HTTPException``; the CLI maps ``ConfigError`` to exit code 1 and
every other ``ProudError`` to exit code 2.
"""

from __future__ import annotations


class ProudError(Exception):
    """Base class for every error raised by the package."""

    exit_code = 2

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


# ------------------------------------------------------------------ #
#  NUMERICS
# ------------------------------------------------------------------ #
class ShapeError(ProudError):
    pass


class NumericDomainError(ProudError):
    """Raised for log of a non-positive entry."""


class DegenerateVectorError(ProudError):
    """Raised when a vector to be normalized has norm below the floor."""


class InvalidArgumentError(ProudError):
    pass


# ------------------------------------------------------------------ #
#  DATA / CONFIG
# ------------------------------------------------------------------ #
class StratificationError(ProudError):
    pass


class ConfigError(ProudError):
    exit_code = 1


class FormatError(ProudError):
    """Bad magic, version or framing in one of the binary file formats."""


# ------------------------------------------------------------------ #
#  INVARIANTS / AUDITS
# ------------------------------------------------------------------ #
class InvariantViolation(ProudError):
    pass


class IsolationError(ProudError):
    """Hidden labels or test inputs were read outside the metrics path."""
