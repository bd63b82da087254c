"""
Exceptions
==========

Error types raised across the trojanlab package. Each one also derives from
the closest builtin so callers can catch ``ValueError``/``RuntimeError``.
"""

from typing import Optional


class TrojanLabError(Exception):
    """Base class for every trojanlab error."""


class DimensionError(TrojanLabError, ValueError):
    """Tensor or array shapes do not line up."""


class UsageError(TrojanLabError, ValueError):
    """An operation was called outside of its preconditions."""


class TapeError(TrojanLabError, RuntimeError):
    """A recorded tape was replayed or used after backward."""


class NonFiniteError(TrojanLabError, FloatingPointError):
    """NaN or Inf reached a tensor."""


class FormatError(TrojanLabError, ValueError):
    """A file on disk is truncated, corrupt or of the wrong version."""


class AttackSetupError(TrojanLabError, ValueError):
    """An attack cannot be configured against the given data or model."""


class TrainingError(TrojanLabError, RuntimeError):
    """Optimization diverged.

    Args:
        message: Human readable diagnostic
        step: Training step at which the failure was detected
    """

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class PolicyError(TrojanLabError, RuntimeError):
    """A policy produced an unusable action during a rollout."""

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step
