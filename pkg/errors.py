#!/usr/bin/env python3
"""
errors.py — Exception hierarchy for the PatchGD engine

Every error raised on purpose by this repo derives from PatchGDError and
from the closest builtin, so callers may catch either one.

Messages name the offending axis / parameter / key.
"""

from __future__ import annotations

from typing import Optional


class PatchGDError(Exception):
    """Root of all deliberate errors."""


class DimensionError(PatchGDError, ValueError):
    """Shape or axis mismatch between tensors / layers."""


class ValidationError(PatchGDError, ValueError):
    """Input values out of their allowed domain (labels, lengths, ...)."""


class ContractError(PatchGDError, RuntimeError):
    """A call violated an API contract (non-scalar backward, duplicate cells, ...)."""


class GridIndexError(PatchGDError, IndexError):
    """Patch grid position outside the m×n grid."""


class StateError(PatchGDError, RuntimeError):
    """Object used in the wrong lifecycle state (e.g. Z read before fill)."""


class ConfigError(PatchGDError, ValueError):
    """Configuration violates an invariant. `violations` lists every one found."""

    def __init__(self, message: str, violations: Optional[list[str]] = None):
        super().__init__(message)
        self.violations = list(violations or [message])


class ParseError(PatchGDError, ValueError):
    """Malformed binary input. `offset` is the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class LoadError(PatchGDError, ValueError):
    """Checkpoint / dataset could not be restored. `name` is the offending entry."""

    def __init__(self, message: str, name: Optional[str] = None):
        super().__init__(message)
        self.name = name


class NonFiniteError(PatchGDError, FloatingPointError):
    """NaN/Inf met in a loss or gradient. `name` is the parameter (or 'loss')."""

    def __init__(self, message: str, name: Optional[str] = None):
        super().__init__(message)
        self.name = name
